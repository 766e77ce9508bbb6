"""Fixation/saccade segmentation by velocity threshold with hysteresis."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import DT_S, GazeWindow, VelocitySignal

FIXATION = "Fixation"
SACCADE = "Saccade"
CHANNELS = ("H", "V", "R")


@dataclass(frozen=True)
class SegmentationConfig:
    open_deg_s: float = 45.0
    close_deg_s: float = 25.0
    min_saccade_ms: int = 10
    min_fixation_ms: int = 50
    merge_gap_ms: int = 75
    merge_distance_deg: float = 0.5


@dataclass
class Event:
    """One classified span; ``start``/``end`` are sample offsets (ms), end exclusive."""

    kind: str
    start: int
    end: int
    measures: dict = field(default_factory=dict)

    @property
    def duration_ms(self) -> int:
        return self.end - self.start


@dataclass
class Segmentation:
    events: list
    unclassified: list
    n_samples: int
    key: tuple | None = None
    window_index: int = 0

    def of_kind(self, kind: str) -> list:
        return [e for e in self.events if e.kind == kind]

    def spans(self) -> list:
        """Every classified and unclassified span, sorted by start."""
        out = [(e.start, e.end, e.kind) for e in self.events]
        out += [(s, e, "Unclassified") for s, e in self.unclassified]
        return sorted(out)


def _positions(p) -> np.ndarray:
    return p.positions if isinstance(p, GazeWindow) else np.asarray(p, dtype=float)


def detect_saccades(speed: np.ndarray, cfg: SegmentationConfig) -> list:
    """Hysteresis scan: open at >= open threshold, close at the first sample below close."""
    above = np.flatnonzero(speed >= cfg.open_deg_s)
    below = np.flatnonzero(speed < cfg.close_deg_s)
    spans = []
    pos = 0
    while True:
        k = np.searchsorted(above, pos)
        if k == len(above):
            break
        on = int(above[k])
        j = np.searchsorted(below, on)
        off = int(below[j]) if j < len(below) else len(speed)
        spans.append((on, off))
        pos = off
    return spans


def _complement(spans, n):
    out, cur = [], 0
    for s, e in spans:
        if s > cur:
            out.append((cur, s))
        cur = e
    if cur < n:
        out.append((cur, n))
    return out


def segment(v: VelocitySignal, p, cfg: SegmentationConfig = SegmentationConfig()) -> Segmentation:
    """Label a gap-free window as fixations, saccades and unclassified spans."""
    pos = _positions(p)
    n = len(v)
    speed = v.speed
    saccades = [s for s in detect_saccades(speed, cfg) if s[1] - s[0] >= cfg.min_saccade_ms]
    candidates = _complement(saccades, n)
    fixations = [c for c in candidates if c[1] - c[0] >= cfg.min_fixation_ms]

    merged = []
    for s, e in fixations:
        if merged:
            ps, pe = merged[-1]
            gap = s - pe
            dist = float(np.hypot(*(pos[:, s] - pos[:, pe - 1])))
            if gap < cfg.merge_gap_ms and dist < cfg.merge_distance_deg:
                merged[-1] = (ps, e)
                continue
        merged.append((s, e))
    saccades = [(s, e) for s, e in saccades
                if not any(fs <= s and e <= fe for fs, fe in merged)]

    events = [Event(FIXATION, s, e) for s, e in merged] + [Event(SACCADE, s, e) for s, e in saccades]
    events.sort(key=lambda ev: ev.start)
    unclassified = _complement([(ev.start, ev.end) for ev in events], n)
    for ev in events:
        ev.measures = event_measures(ev.start, ev.end, v, pos)
    key = p.key if isinstance(p, GazeWindow) else None
    index = p.window_index if isinstance(p, GazeWindow) else 0
    return Segmentation(events, unclassified, n, key, index)


def _triple(h, v, r, name, out):
    out[f"{name}_H"], out[f"{name}_V"], out[f"{name}_R"] = float(h), float(v), float(r)


def event_measures(start: int, end: int, v: VelocitySignal, p) -> dict:
    """Scalar measures of the span [start, end).

    Displacements run from the span's first sample to the first sample after
    it (clamped to the window), so a span of k samples at constant speed u
    covers k * u * dt degrees.
    """
    pos = _positions(p)
    n = pos.shape[1]
    stop = min(end, n - 1)
    dur_s = (end - start) * DT_S
    vx, vy = np.abs(v.vx[start:end]), np.abs(v.vy[start:end])
    sp = np.hypot(v.vx[start:end], v.vy[start:end])
    x, y = pos[0, start:end], pos[1, start:end]
    dx = pos[0, stop] - pos[0, start]
    dy = pos[1, stop] - pos[1, start]
    ampl = np.hypot(dx, dy)
    steps = np.diff(pos[:, start:stop + 1], axis=1)
    path = float(np.hypot(steps[0], steps[1]).sum())

    m = {"Dur_R": float(end - start)}
    _triple(abs(dx), abs(dy), ampl, "Ampl", m)
    _triple(vx.max(), vy.max(), sp.max(), "PkVel", m)
    _triple(abs(dx) / dur_s, abs(dy) / dur_s, ampl / dur_s, "MnVel", m)
    acc = [np.abs(np.diff(c)) / DT_S if len(c) > 1 else np.zeros(1) for c in (vx, vy, sp)]
    _triple(*(a.max() for a in acc), "PkAcc", m)
    _triple(*(a.mean() for a in acc), "MnAcc", m)
    _triple(vx.mean(), vy.mean(), sp.mean(), "VelProfMn", m)
    _triple(vx.std(), vy.std(), sp.std(), "VelProfSd", m)
    _triple(np.median(vx), np.median(vy), np.median(sp), "VelProfMd", m)
    m["PathLen_R"] = path
    m["Straight_R"] = float(ampl / path) if path > 0 else 1.0
    m["PkVelFrac_R"] = float(np.argmax(sp) / (end - start))
    _triple(abs(dx), abs(dy), ampl, "DriftDisp", m)
    _triple(abs(dx) / dur_s, abs(dy) / dur_s, ampl / dur_s, "DriftVel", m)
    sdx, sdy = x.std(), y.std()
    _triple(sdx, sdy, np.hypot(sdx, sdy), "PosSd", m)
    rx, ry = np.ptp(x), np.ptp(y)
    _triple(rx, ry, np.hypot(rx, ry), "PosRange", m)
    return m


def write_segmentations(path, segmentations, comment: str | None = None) -> None:
    """CSV: window_key,kind,start_ms,end_ms,<measure columns>."""
    names = None
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        for seg in segmentations:
            key = "/".join(str(k) for k in (seg.key or ())) + f"#{seg.window_index}"
            for ev in seg.events:
                if names is None:
                    names = sorted(ev.measures)
                    w.writerow(["window_key", "kind", "start_ms", "end_ms"] + names)
                w.writerow([key, ev.kind, ev.start, ev.end] + [f"{ev.measures[k]:.6g}" for k in names])
        if names is None:
            w.writerow(["window_key", "kind", "start_ms", "end_ms"])
