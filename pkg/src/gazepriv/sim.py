"""Parametric oculomotor simulator with exact ground truth.

Windows alternate fixations (anchor + linear drift + white jitter) with
saccades whose speed profile is a tapered raised cosine: cosine ramps
around a flat top, sized so that the duration follows the main-sequence
line, the peak follows the saturating amplitude/peak-velocity curve and
the profile integrates to the amplitude exactly.

A latent fatigue level per (subject, round) drives the subjective ratings
and, scaled by the coupling gain g, shortens fixations (raising saccade
rate). g = 0 leaves gaze independent of state.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import TASKS
from .core import WINDOW_SAMPLES, GazeWindow, SubjectiveReport
from .errors import ConfigError
from .events import FIXATION, SACCADE, Event, Segmentation
from .metrics import TargetSequence

TASK_FIXATION_MS = {"HSS": 600.0, "RAN": 500.0, "TEX": 230.0}
TASK_INDEX = {t: i for i, t in enumerate(TASKS)}


@dataclass(frozen=True)
class SimConfig:
    task: str = "HSS"
    jitter_sd: float = 0.005
    drift_rate: float = 0.3
    eta: float = 500.0
    c: float = 6.0
    duration_slope: float = 2.2
    duration_intercept: float = 21.0
    coupling: float = 0.0
    fatigue_gain: float = 0.45
    fixation_ms: float | None = None
    fixation_shape: float = 8.0
    min_fixation_ms: int = 120
    landing_sd: float = 0.15
    offset: tuple = (0.0, 0.0)
    offset_gain: tuple = (0.0, 0.0)
    hss_half_width: float = 10.0
    ran_extent: tuple = (15.0, 9.0)
    ran_min_amplitude: float = 3.0
    reading_saccade: tuple = (2.0, 0.5)
    saccades: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.jitter_sd < 0 or self.drift_rate < 0 or self.landing_sd < 0:
            raise ConfigError("jitter, drift and landing spread must be non-negative")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError("coupling gain must lie in [0, 1]")
        if self.eta <= 0 or self.c <= 0:
            raise ConfigError("main-sequence constants must be positive")

    @property
    def base_fixation_ms(self) -> float:
        return self.fixation_ms if self.fixation_ms is not None else TASK_FIXATION_MS[self.task]

    def peak_velocity(self, amplitude: float) -> float:
        return self.eta * (1.0 - math.exp(-amplitude / self.c))

    def duration_ms(self, amplitude: float) -> float:
        return self.duration_slope * amplitude + self.duration_intercept


@dataclass(frozen=True)
class SubjectLatents:
    subject_id: str
    jitter_scale: float = 1.0
    drift_scale: float = 1.0
    tempo: float = 1.0
    fatigue: float = 0.0


@dataclass
class SimulatedWindow:
    window: GazeWindow
    truth: Segmentation
    targets: TargetSequence

    def __iter__(self):
        return iter((self.window, self.truth))


@dataclass
class CohortItem:
    sim: SimulatedWindow
    report: SubjectiveReport
    fatigue: float


@dataclass
class SimCohort:
    items: list
    latents: dict
    coupling: float
    seed: int
    base: SimConfig = field(default_factory=SimConfig)

    @property
    def windows(self) -> list:
        return [it.sim.window for it in self.items]

    @property
    def reports(self) -> list:
        return [it.report for it in self.items]


class SaccadeProfile:
    """Flat-topped raised-cosine speed profile; times in ms, speeds in deg/s."""

    def __init__(self, amplitude: float, peak: float, duration_ms: float):
        self.amplitude = amplitude
        d = max(int(round(duration_ms)), 2)
        vp = peak / 1000.0
        ramp = d - amplitude / vp
        if ramp > d / 2:
            # too slow for a pure cosine bell of this length: stretch it
            d = int(math.ceil(2 * amplitude / vp))
            ramp = d / 2
            vp = amplitude / (d - ramp)
        elif ramp < 0:
            d = int(math.ceil(amplitude / vp)) + 1
            ramp = d - amplitude / vp
        self.duration = d
        self.ramp = ramp
        self.peak = vp * 1000.0
        self._vp = vp

    def _rise(self, tau):
        lr = self.ramp
        if lr == 0:
            return np.zeros_like(tau)
        return self._vp * (tau / 2 - lr / (2 * np.pi) * np.sin(np.pi * tau / lr))

    def displacement(self, tau) -> np.ndarray:
        """Distance covered after ``tau`` ms, 0 at onset and ``amplitude`` at the end."""
        tau = np.clip(np.asarray(tau, dtype=float), 0, self.duration)
        d, lr = self.duration, self.ramp
        out = np.where(tau <= lr, self._rise(np.minimum(tau, lr)),
                       self._rise(np.asarray(lr)) + self._vp * (tau - lr))
        total = self._vp * (d - lr)
        falling = tau >= d - lr
        out = np.where(falling, total - self._rise(np.clip(d - tau, 0, lr)), out)
        return out


class _Targets:
    def __init__(self, cfg: SimConfig, rng):
        self.cfg, self.rng = cfg, rng
        if cfg.task == "HSS":
            self.current = np.array([-cfg.hss_half_width, 0.0])
        elif cfg.task == "RAN":
            self.current = self._uniform()
        else:
            self.current = np.array([-12.0, 6.0])

    def _uniform(self):
        ex, ey = self.cfg.ran_extent
        return np.array([self.rng.uniform(-ex, ex), self.rng.uniform(-ey, ey)])

    def next(self):
        cfg = self.cfg
        if cfg.task == "HSS":
            self.current = np.array([-self.current[0], 0.0])
        elif cfg.task == "RAN":
            while True:
                cand = self._uniform()
                if np.hypot(*(cand - self.current)) >= cfg.ran_min_amplitude:
                    break
            self.current = cand
        else:
            mean, sd = cfg.reading_saccade
            x = self.current[0] + float(np.clip(self.rng.normal(mean, sd), 1.2, 4.0))
            y = self.current[1]
            if x > 12.0:
                x = -12.0 + self.rng.normal(0.0, 0.3)
                y = y - 1.5 if y - 1.5 >= -6.0 else 6.0
            self.current = np.array([x, y])
        return self.current.copy()


def _offset_at(cfg: SimConfig, target) -> np.ndarray:
    return np.asarray(cfg.offset, float) + np.asarray(cfg.offset_gain, float) * target


def simulate_window(cfg: SimConfig, subject: SubjectLatents | None = None, session: int = 1,
                    round_: int = 1, window_index: int = 0, seed=None) -> SimulatedWindow:
    """Generate one labelled 5 s window. ``seed`` defaults to ``cfg.rng_seed``."""
    subject = subject or SubjectLatents("S000")
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    n = WINDOW_SAMPLES
    pos = np.zeros((2, n))
    events = []
    targets = _Targets(cfg, rng)
    target = targets.current.copy()
    anchor = target + _offset_at(cfg, target)
    onsets, target_pos = [0], [target]
    rate_gain = math.exp(cfg.coupling * cfg.fatigue_gain * subject.fatigue)
    mean_fix = cfg.base_fixation_ms * subject.tempo / rate_gain
    drift_speed = cfg.drift_rate * subject.drift_scale / 1000.0
    t = 0
    while t < n:
        if cfg.saccades:
            dur = int(round(rng.gamma(cfg.fixation_shape, mean_fix / cfg.fixation_shape)))
            dur = max(dur, cfg.min_fixation_ms)
        else:
            dur = n
        theta = rng.uniform(0, 2 * np.pi)
        drift = drift_speed * np.array([np.cos(theta), np.sin(theta)])
        stop = min(t + dur, n)
        tau = np.arange(stop - t)
        pos[:, t:stop] = anchor[:, None] + drift[:, None] * tau[None, :]
        events.append(Event(FIXATION, t, stop))
        start_point = anchor + drift * dur
        t += dur
        if t >= n:
            break
        target = targets.next()
        landing = target + _offset_at(cfg, target) + rng.normal(0.0, cfg.landing_sd, 2)
        delta = landing - start_point
        amplitude = float(np.hypot(*delta))
        prof = SaccadeProfile(amplitude, cfg.peak_velocity(amplitude), cfg.duration_ms(amplitude))
        if t + prof.duration + cfg.min_fixation_ms > n:
            # no room for a landing fixation: hold the current one to the window end
            tau = np.arange(t - events[-1].start, n - events[-1].start)
            pos[:, t:n] = anchor[:, None] + drift[:, None] * tau[None, :]
            events[-1] = Event(FIXATION, events[-1].start, n)
            break
        stop = t + prof.duration
        tau = np.arange(stop - t)
        frac = prof.displacement(tau) / amplitude
        pos[:, t:stop] = start_point[:, None] + delta[:, None] * frac[None, :]
        ev = Event(SACCADE, t, stop, {"amplitude": amplitude, "peak_velocity": prof.peak})
        events.append(ev)
        onsets.append(t)
        target_pos.append(target)
        t += prof.duration
        anchor = landing
    sd = cfg.jitter_sd * subject.jitter_scale
    if sd > 0:
        pos = pos + rng.normal(0.0, sd, pos.shape)
    window = GazeWindow(np.arange(n), pos[0], pos[1], np.ones(n, dtype=bool), subject.subject_id,
                        session, round_, cfg.task, window_index=window_index, source="sim")
    truth = Segmentation(events, [], n, window.key, window_index)
    return SimulatedWindow(window, truth, TargetSequence(np.array(onsets), np.array(target_pos)))


def draw_subject(rng, subject_id: str) -> SubjectLatents:
    """Identity latents: stable per subject, independent of state."""
    return SubjectLatents(
        subject_id,
        jitter_scale=float(np.exp(rng.normal(0, 0.25))),
        drift_scale=float(np.exp(rng.normal(0, 0.3))),
        tempo=float(np.exp(rng.normal(0, 0.12))),
    )


def _rating(rng, fatigue: float, gain: float, noise: float) -> int:
    return int(np.clip(np.rint(3.5 + gain * fatigue + rng.normal(0.0, noise)), 1, 7))


def simulate_cohort(cfg: SimConfig, n_subjects: int, rounds=(2, 3, 4), coupling: float = 1.0,
                    sessions=(1,), tasks=None, seed: int = 0, rating_noise: float = 0.6) -> SimCohort:
    """One window and one report per (subject, session, round, task).

    Latent fatigue per (subject, round) drives all three ratings (monotone
    plus noise) and, through ``coupling``, the saccade rate.
    """
    if n_subjects < 10:
        raise ConfigError("a cohort needs at least 10 subjects")
    if not 0.0 <= coupling <= 1.0:
        raise ConfigError("coupling gain must lie in [0, 1]")
    tasks = tuple(tasks) if tasks else (cfg.task,)
    latents, items = {}, []
    for si in range(n_subjects):
        sid = f"S{si + 1:03d}"
        rng = np.random.default_rng([seed, si, 0])
        base = draw_subject(rng, sid)
        trait = rng.normal(0.0, 0.35)
        latents[sid] = base
        for rnd in rounds:
            state = trait + rng.normal(0.0, 0.85)
            for ses in sessions:
                fatigue = state + rng.normal(0.0, 0.2)
                for task in tasks:
                    rr = np.random.default_rng([seed, si, 1, rnd, ses, TASK_INDEX[task]])
                    report = SubjectiveReport(sid, ses, rnd, task,
                                              _rating(rr, fatigue, 1.2, rating_noise),
                                              _rating(rr, fatigue, 1.0, rating_noise),
                                              _rating(rr, fatigue, 1.1, rating_noise))
                    wcfg = replace(cfg, task=task, coupling=coupling)
                    sim = simulate_window(wcfg, replace(base, fatigue=fatigue), ses, rnd,
                                          seed=[seed, si, 2, rnd, ses, TASK_INDEX[task]])
                    items.append(CohortItem(sim, report, fatigue))
    return SimCohort(items, latents, coupling, seed, cfg)


def decoupled_counterpart(cohort: SimCohort, stream: int = 7) -> SimCohort:
    """Same subjects, identity latents and ratings; gaze regenerated with g = 0.

    Stands in for an ideal state-removing synthesizer: it keeps every
    identity trait the real cohort has and drops only the state coupling.
    """
    items = []
    for it in cohort.items:
        w = it.sim.window
        base = cohort.latents[w.subject_id]
        wcfg = replace(cohort.base, task=w.task, coupling=0.0)
        sim = simulate_window(wcfg, replace(base, fatigue=it.fatigue), w.session, w.round,
                              seed=[cohort.seed, stream, int(w.subject_id[1:]), w.round, w.session,
                                    TASK_INDEX[w.task]])
        items.append(CohortItem(sim, it.report, it.fatigue))
    return SimCohort(items, cohort.latents, 0.0, cohort.seed, cohort.base)


def _write_rows(path: Path, header, rows, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_corpus(cohort: SimCohort, out_dir, comment: str | None = None) -> dict:
    """Write gaze CSVs, manifest, ratings, stimulus targets and ground-truth events."""
    out = Path(out_dir)
    (out / "gaze").mkdir(parents=True, exist_ok=True)
    manifest, ratings, targets, truth = [], [], [], []
    for it in cohort.items:
        w = it.sim.window
        name = f"gaze/{w.subject_id}_s{w.session}_r{w.round}_{w.task}.csv"
        rows = ((int(t), f"{x:.6f}", f"{y:.6f}", int(v)) for t, x, y, v in zip(w.t, w.x, w.y, w.valid))
        _write_rows(out / name, ["t_ms", "x_deg", "y_deg", "valid"], rows, comment)
        manifest.append([name, w.subject_id, w.session, w.round, w.task])
        r = it.report
        ratings.append([r.subject_id, r.session, r.round, r.task, r.over_diff, r.mentally, r.tired_eyes])
        ts = it.sim.targets
        for onset, (tx, ty) in zip(ts.onsets, ts.positions):
            targets.append([w.subject_id, w.session, w.round, w.task, w.window_index, int(onset),
                            f"{tx:.6f}", f"{ty:.6f}"])
        for ev in it.sim.truth.events:
            truth.append([w.subject_id, w.session, w.round, w.task, w.window_index, ev.kind, ev.start, ev.end])
    _write_rows(out / "manifest.csv", ["file", "subject_id", "session", "round", "task"], manifest, comment)
    _write_rows(out / "ratings.csv", ["subject_id", "session", "round", "task", "over_diff", "mentally",
                                      "tired_eyes"], ratings, comment)
    _write_rows(out / "targets.csv", ["subject_id", "session", "round", "task", "window_index", "t_ms",
                                      "x_deg", "y_deg"], targets, comment)
    _write_rows(out / "truth_events.csv", ["subject_id", "session", "round", "task", "window_index", "kind",
                                           "start_ms", "end_ms"], truth, comment)
    return {"windows": len(cohort.items), "reports": len(ratings)}
