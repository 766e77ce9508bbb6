"""Gaze data model, CSV ingestion, windowing and position/velocity preprocessing."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import uniform_filter1d

from . import TASKS
from .errors import ParseError, SchemaError, WindowRejected

SAMPLE_RATE_HZ = 1000
DT_S = 1.0 / SAMPLE_RATE_HZ
WINDOW_SAMPLES = 5000
MAX_INVALID_FRACTION = 0.10
MAX_GAP_MS = 75
# odd length keeps the average centred (zero phase); spans 50 ms
SMOOTHING_SAMPLES = 51
SPEED_PERCENTILE = 95.0
SPEED_FLOOR = 1.0

GAZE_COLUMNS = ("t_ms", "x_deg", "y_deg", "valid")
MANIFEST_COLUMNS = ("file", "subject_id", "session", "round", "task")
RATING_COLUMNS = ("subject_id", "session", "round", "task", "over_diff", "mentally", "tired_eyes")


class GazeSample(NamedTuple):
    t: int
    x: float
    y: float
    valid: bool


class WindowKey(NamedTuple):
    subject_id: str
    session: int
    round: int
    task: str


@dataclass
class GazeWindow:
    """Five seconds of monocular gaze at 1 kHz plus its recording key.

    ``valid`` keeps the tracker's validity flags even after gaps have been
    interpolated, so downstream code can still tell measured from filled
    samples.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    valid: np.ndarray
    subject_id: str
    session: int
    round: int
    task: str
    window_index: int = 0
    source: str = ""

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        n = WINDOW_SAMPLES
        if not (len(self.t) == len(self.x) == len(self.y) == len(self.valid) == n):
            raise SchemaError(f"a gaze window holds exactly {n} samples, got {len(self.t)}")
        if np.any(np.diff(self.t) != 1):
            raise SchemaError("window timestamps must advance by exactly 1 ms")
        if self.task not in TASKS:
            raise SchemaError(f"unknown task {self.task!r}; expected one of {TASKS}")

    @property
    def key(self) -> WindowKey:
        return WindowKey(self.subject_id, self.session, self.round, self.task)

    @property
    def positions(self) -> np.ndarray:
        return np.stack([self.x, self.y])

    def sample(self, i: int) -> GazeSample:
        return GazeSample(int(self.t[i]), float(self.x[i]), float(self.y[i]), bool(self.valid[i]))

    def __len__(self):
        return len(self.t)


@dataclass
class VelocitySignal:
    """Angular velocity in deg/s, one value per sample."""

    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        self.vx = np.asarray(self.vx, dtype=float)
        self.vy = np.asarray(self.vy, dtype=float)
        if self.vx.shape != self.vy.shape or self.vx.ndim != 1:
            raise SchemaError("velocity channels must be 1-d and of equal length")

    @classmethod
    def from_array(cls, a) -> "VelocitySignal":
        a = np.asarray(a, dtype=float)
        return cls(a[0], a[1])

    @property
    def stacked(self) -> np.ndarray:
        return np.stack([self.vx, self.vy])

    @property
    def speed(self) -> np.ndarray:
        return np.hypot(self.vx, self.vy)

    def __len__(self):
        return len(self.vx)


@dataclass
class IdentityRemovedSignal:
    vx0: np.ndarray
    vy0: np.ndarray
    scale: float = 1.0

    @property
    def stacked(self) -> np.ndarray:
        return np.stack([self.vx0, self.vy0])


@dataclass
class SubjectiveReport:
    subject_id: str
    session: int
    round: int
    task: str
    over_diff: int
    mentally: int
    tired_eyes: int

    def __post_init__(self):
        for name in ("over_diff", "mentally", "tired_eyes"):
            value = getattr(self, name)
            if int(value) != value or not 1 <= value <= 7:
                raise SchemaError(f"{name}={value} is outside the 1-7 Likert range")
            setattr(self, name, int(value))

    @property
    def key(self) -> WindowKey:
        return WindowKey(self.subject_id, self.session, self.round, self.task)


@dataclass
class IngestResult:
    windows: list = field(default_factory=list)
    files: int = 0
    dropped_invalid: int = 0
    rejected_gap: int = 0
    partial_tail: int = 0

    @property
    def report(self) -> dict:
        return {
            "files": self.files,
            "windows": len(self.windows),
            "dropped_invalid_fraction": self.dropped_invalid,
            "rejected_long_gap": self.rejected_gap,
            "partial_tail": self.partial_tail,
        }


def _data_rows(path: Path):
    """Yield (line_number, row) pairs, skipping '#' provenance lines."""
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            yield lineno, row


def _read_table(path: Path, columns) -> list:
    rows = _data_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise SchemaError(f"{path}: empty file, expected header {','.join(columns)}")
    header = [h.strip() for h in header]
    missing = [c for c in columns if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    idx = [header.index(c) for c in columns]
    out = []
    for lineno, row in rows:
        if len(row) != len(header):
            raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
        out.append((lineno, [row[i].strip() for i in idx]))
    return out


def read_gaze_csv(path) -> tuple:
    """Parse one recording into (t, x, y, valid) arrays."""
    path = Path(path)
    rows = _read_table(path, GAZE_COLUMNS)
    n = len(rows)
    t = np.empty(n, dtype=np.int64)
    x = np.empty(n)
    y = np.empty(n)
    valid = np.empty(n, dtype=bool)
    for i, (lineno, (ts, xs, ys, vs)) in enumerate(rows):
        try:
            tf = float(ts)
            x[i] = float(xs)
            y[i] = float(ys)
        except ValueError:
            raise ParseError(path, lineno, "non-numeric field")
        if tf != int(tf):
            raise ParseError(path, lineno, f"timestamp {ts} is not an integer millisecond")
        t[i] = int(tf)
        if vs not in ("0", "1"):
            raise ParseError(path, lineno, f"valid must be 0 or 1, got {vs!r}")
        valid[i] = vs == "1"
        if valid[i] and not (math.isfinite(x[i]) and math.isfinite(y[i])):
            raise ParseError(path, lineno, "valid sample with non-finite position")
        if i and t[i] <= t[i - 1]:
            raise ParseError(path, lineno, "timestamps must be strictly increasing")
    return t, x, y, valid


def read_manifest(path) -> list:
    path = Path(path)
    entries = []
    for lineno, (fname, subject, session, rnd, task) in _read_table(path, MANIFEST_COLUMNS):
        try:
            session, rnd = int(session), int(rnd)
        except ValueError:
            raise ParseError(path, lineno, "session and round must be integers")
        if task not in TASKS:
            raise ParseError(path, lineno, f"unknown task {task!r}")
        entries.append((fname, WindowKey(subject, session, rnd, task)))
    return entries


def load_ratings(path) -> list:
    path = Path(path)
    reports = []
    for lineno, vals in _read_table(path, RATING_COLUMNS):
        try:
            reports.append(SubjectiveReport(
                vals[0], int(vals[1]), int(vals[2]), vals[3],
                int(vals[4]), int(vals[5]), int(vals[6]),
            ))
        except (ValueError, SchemaError) as exc:
            raise ParseError(path, lineno, str(exc))
    return reports


def _contiguous_runs(mask: np.ndarray) -> list:
    """(start, stop) index pairs of the True runs in ``mask``."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def load_recordings(path, manifest=None) -> IngestResult:
    """Cut every manifest-listed recording into non-overlapping 5 s windows.

    Windows are left-aligned inside each run of 1 ms-contiguous timestamps.
    A window with more than 10% invalid samples is dropped; one whose
    longest invalid run exceeds 75 ms is rejected; the rest are gap-filled.
    """
    root = Path(path)
    manifest = Path(manifest) if manifest is not None else root / "manifest.csv"
    result = IngestResult()
    if not manifest.exists():
        if root.is_dir() and not any(root.glob("**/*.csv")):
            return result
        raise SchemaError(f"manifest {manifest} not found")
    entries = sorted(read_manifest(manifest), key=lambda e: (e[1], e[0]))
    for fname, key in entries:
        t, x, y, valid = read_gaze_csv(root / fname)
        result.files += 1
        index = 0
        breaks = np.flatnonzero(np.diff(t) != 1) + 1
        for seg_start, seg_stop in zip(np.r_[0, breaks], np.r_[breaks, len(t)]):
            n_full = (seg_stop - seg_start) // WINDOW_SAMPLES
            if (seg_stop - seg_start) % WINDOW_SAMPLES:
                result.partial_tail += 1
            for k in range(n_full):
                sl = slice(seg_start + k * WINDOW_SAMPLES, seg_start + (k + 1) * WINDOW_SAMPLES)
                w = GazeWindow(t[sl], x[sl], y[sl], valid[sl], *key, window_index=index, source=fname)
                index += 1
                if np.mean(~w.valid) > MAX_INVALID_FRACTION:
                    result.dropped_invalid += 1
                    continue
                try:
                    result.windows.append(interpolate_invalid(w))
                except WindowRejected:
                    result.rejected_gap += 1
    return result


def interpolate_invalid(w: GazeWindow, max_gap_ms: int = MAX_GAP_MS,
                        max_invalid_fraction: float = MAX_INVALID_FRACTION) -> GazeWindow:
    """Linearly bridge invalid runs; edge runs hold the nearest valid sample."""
    invalid = ~w.valid
    if not invalid.any():
        return w
    frac = invalid.mean()
    if frac > max_invalid_fraction:
        raise WindowRejected(f"{frac:.1%} invalid samples exceeds {max_invalid_fraction:.0%}")
    longest = max(stop - start for start, stop in _contiguous_runs(invalid))
    if longest > max_gap_ms:
        raise WindowRejected(f"invalid run of {longest} ms exceeds {max_gap_ms} ms")
    good = np.flatnonzero(w.valid)
    x = np.interp(w.t, w.t[good], w.x[good])
    y = np.interp(w.t, w.t[good], w.y[good])
    return replace(w, x=x, y=y, valid=w.valid.copy())


def position_to_velocity(w) -> VelocitySignal:
    """Central differences in the interior, one-sided at both ends."""
    p = w.positions if isinstance(w, GazeWindow) else np.asarray(w, dtype=float)
    return VelocitySignal(np.gradient(p[0], DT_S), np.gradient(p[1], DT_S))


def velocity_to_position(v: VelocitySignal, p0=(0.0, 0.0)) -> np.ndarray:
    """Cumulative trapezoidal integral anchored at ``p0``; returns shape (2, n)."""
    out = []
    for ch, start in zip((v.vx, v.vy), p0):
        steps = 0.5 * (ch[1:] + ch[:-1]) * DT_S
        out.append(start + np.concatenate([[0.0], np.cumsum(steps)]))
    return np.stack(out)


def window_from_velocity(v: VelocitySignal, template: GazeWindow, p0=None) -> GazeWindow:
    """Integrate a velocity signal into a window carrying ``template``'s key."""
    if p0 is None:
        p0 = (template.x[0], template.y[0])
    p = velocity_to_position(v, p0)
    return GazeWindow(template.t.copy(), p[0], p[1], np.ones(len(template), dtype=bool),
                      template.subject_id, template.session, template.round, template.task,
                      window_index=template.window_index, source=template.source)


def moving_average(a: np.ndarray, size: int = SMOOTHING_SAMPLES) -> np.ndarray:
    return uniform_filter1d(np.asarray(a, dtype=float), size=size, mode="reflect")


def moving_average_gain(freq_hz, size: int = SMOOTHING_SAMPLES, fs: float = SAMPLE_RATE_HZ):
    """Magnitude response of a centred ``size``-tap boxcar at ``freq_hz``."""
    w = np.pi * np.asarray(freq_hz, dtype=float) / fs
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.abs(np.sin(size * w) / (size * np.sin(w)))
    return np.where(w == 0, 1.0, g)


def identity_removal(v: VelocitySignal, size: int = SMOOTHING_SAMPLES,
                     percentile: float = SPEED_PERCENTILE, floor: float = SPEED_FLOOR) -> IdentityRemovedSignal:
    """Smooth away fine idiosyncratic structure, then normalize out the speed scale."""
    sx = moving_average(v.vx, size)
    sy = moving_average(v.vy, size)
    scale = max(float(np.percentile(np.hypot(sx, sy), percentile)), floor)
    return IdentityRemovedSignal(sx / scale, sy / scale, scale)
