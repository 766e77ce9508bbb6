"""Signal-quality metrics: spatial accuracy, RMS precision, embedding similarity."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .core import position_to_velocity
from .embedding import cosine_similarity, encode
from .errors import PairingError, SchemaError
from .events import FIXATION


@dataclass
class TargetSequence:
    """Stimulus targets: onset offsets in ms (ascending) and positions (k, 2) in degrees."""

    onsets: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.onsets = np.asarray(self.onsets, dtype=int).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if len(self.onsets) != len(self.positions):
            raise SchemaError("target onsets and positions differ in length")
        if np.any(np.diff(self.onsets) <= 0):
            raise SchemaError("target onsets must be strictly increasing")

    def epochs(self, n: int) -> list:
        """(start, stop, target) per epoch; the last epoch runs to the window end."""
        if len(self.onsets) and (self.onsets[0] < 0 or self.onsets[-1] >= n):
            raise SchemaError("target timestamps fall outside the window")
        bounds = list(self.onsets) + [n]
        return [(int(bounds[i]), int(bounds[i + 1]), self.positions[i]) for i in range(len(self.onsets))]


def spatial_accuracy(p, targets: TargetSequence):
    """Mean distance between each epoch's steady-state centroid and its target.

    Steady state is the last half of the epoch. Epochs with no samples are
    skipped; returns None when every epoch is empty.
    """
    p = np.asarray(p, dtype=float)
    dists = []
    for start, stop, target in targets.epochs(p.shape[1]):
        lo = start + (stop - start) // 2
        if stop <= lo:
            continue
        centroid = p[:, lo:stop].mean(axis=1)
        dists.append(float(np.hypot(*(centroid - target))))
    return float(np.mean(dists)) if dists else None


def rms_precision(fixations):
    """Sample-to-sample RMS displacement, averaged over fixations weighted by sample count.

    ``fixations`` is a sequence of (2, k) position arrays. Fixations with
    fewer than 2 samples are skipped; returns None when none qualify.
    """
    num = den = 0.0
    for f in fixations:
        f = np.asarray(f, dtype=float)
        if f.shape[1] < 2:
            continue
        steps = np.diff(f, axis=1)
        rms = math.sqrt(float(np.mean(np.sum(steps ** 2, axis=0))))
        num += rms * f.shape[1]
        den += f.shape[1]
    return num / den if den else None


def fixation_samples(p, segmentation) -> list:
    """Position slices for every fixation of a segmentation."""
    p = np.asarray(p, dtype=float)
    return [p[:, e.start:e.end] for e in segmentation.of_kind(FIXATION)]


@dataclass
class TaskSimilarity:
    cosine_mean: float
    cosine_per_subject: dict
    n_pairs: int


def _pair_key(w):
    return (w.subject_id, w.session, w.round, w.task, w.window_index)


def similarity_report(real, synth) -> dict:
    """Per-task mean cosine between paired real and synthetic embeddings.

    Windows pair by (key, window_index); both sides must hold the same set.
    """
    real, synth = list(real), list(synth)
    by_key = {}
    for w in synth:
        k = _pair_key(w)
        if k in by_key:
            raise PairingError(f"duplicate synthetic window {k}")
        by_key[k] = w
    if len(by_key) != len(real):
        raise PairingError(f"{len(real)} real windows but {len(by_key)} synthetic windows")
    per_task = defaultdict(list)
    per_subject = defaultdict(lambda: defaultdict(list))
    for w in real:
        k = _pair_key(w)
        if k not in by_key:
            raise PairingError(f"real window {k} has no synthetic partner")
        c = cosine_similarity(encode(position_to_velocity(w)), encode(position_to_velocity(by_key[k])))
        per_task[w.task].append(c)
        per_subject[w.task][w.subject_id].append(c)
    out = {}
    for task in sorted(per_task):
        subj = {s: float(np.mean(v)) for s, v in sorted(per_subject[task].items())}
        out[task] = TaskSimilarity(float(np.mean(per_task[task])), subj, len(per_task[task]))
    return out


def quality_report(accuracy: dict, precision: dict, similarity: dict) -> dict:
    """Assemble the per-task quality JSON payload; missing entries become null."""
    tasks = sorted(set(accuracy) | set(precision) | set(similarity))
    report = {}
    for task in tasks:
        sim = similarity.get(task)
        report[task] = {
            "accuracy_deg": accuracy.get(task),
            "rms_precision_deg": precision.get(task),
            "cosine_mean": sim.cosine_mean if sim else None,
            "cosine_per_subject": sim.cosine_per_subject if sim else {},
        }
    return report
