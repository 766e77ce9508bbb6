"""Spearman rank correlation between gaze features and subjective ratings."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats as sps

from . import RATING_LABELS, RATINGS, TASKS
from .core import WindowKey
from .errors import ConfigError, IntegrityError
from .heatmap import emit_heatmap  # noqa: F401  re-exported

log = logging.getLogger(__name__)

ALPHA = 0.05
EXACT_BELOW = 10
POOLINGS = ("all-rounds", "round-2", "round-3", "round-4")
POOLING_ROUNDS = {"all-rounds": None, "round-2": (2,), "round-3": (3,), "round-4": (4,)}
SESSION_MODES = ("sessions", "round-mean")


def rank(values) -> np.ndarray:
    """Ranks 1..n; tied values share the mean of the positions they occupy."""
    a = np.asarray(values, dtype=float)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    sorted_a = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


@dataclass(frozen=True)
class CorrelationCell:
    rho: float
    p: float
    n: int
    significant: bool
    masked: bool

    @classmethod
    def masked_cell(cls, n: int) -> "CorrelationCell":
        return cls(math.nan, math.nan, n, False, True)


def _pearson(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    return float(np.clip(a @ b / math.sqrt((a @ a) * (b @ b)), -1.0, 1.0))


@lru_cache(maxsize=EXACT_BELOW)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int8)


def _exact_p(rx, ry, rho) -> float:
    """Two-sided permutation p: share of all n! pairings with |rho| at least as large."""
    n = len(rx)
    cx = rx - rx.mean()
    cy = ry - ry.mean()
    denom = math.sqrt((cx @ cx) * (cy @ cy))
    perm_rho = cy[_permutations(n)] @ cx / denom
    hits = np.count_nonzero(np.abs(perm_rho) >= abs(rho) - 1e-12)
    return hits / len(perm_rho)


def _t_p(rho: float, n: int) -> float:
    if abs(rho) >= 1.0:
        return 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return float(min(1.0, 2.0 * sps.t.sf(abs(t), n - 2)))


def spearman(x, y) -> CorrelationCell:
    """Mid-rank correlation; pairs with a missing (NaN) member are dropped first."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("spearman needs equal-length inputs")
    keep = np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    n = len(x)
    if n < 3:
        return CorrelationCell.masked_cell(n)
    rx, ry = rank(x), rank(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return CorrelationCell.masked_cell(n)
    rho = _pearson(rx, ry)
    p = _t_p(rho, n) if n >= EXACT_BELOW else _exact_p(rx, ry, rho)
    return CorrelationCell(rho, p, n, p < ALPHA, False)


@dataclass
class CorrelationMatrix:
    task: str
    pooling: str
    features: list
    cells: list
    ratings: tuple = RATINGS
    empty: bool = False
    session_mode: str = "sessions"

    def __post_init__(self):
        if len(self.cells) != len(self.features) or any(len(r) != len(self.ratings) for r in self.cells):
            raise IntegrityError("correlation matrix shape does not match features x ratings")

    @property
    def shape(self) -> tuple:
        return (len(self.features), len(self.ratings))

    def _grid(self, attr) -> np.ndarray:
        return np.array([[getattr(c, attr) for c in row] for row in self.cells])

    @property
    def rho(self) -> np.ndarray:
        return self._grid("rho")

    @property
    def p(self) -> np.ndarray:
        return self._grid("p")

    @property
    def significant(self) -> np.ndarray:
        return self._grid("significant")

    @property
    def masked(self) -> np.ndarray:
        return self._grid("masked")

    def cell(self, feature: str, rating: str) -> CorrelationCell:
        return self.cells[self.features.index(feature)][list(self.ratings).index(rating)]


@dataclass
class _Joined:
    keys: list = field(default_factory=list)
    features: list = field(default_factory=list)
    present: list = field(default_factory=list)
    ratings: list = field(default_factory=list)


def _join(table, reports, session_mode: str) -> _Joined:
    by_key = {}
    for r in reports:
        if r.key in by_key:
            raise IntegrityError(f"duplicate report for {r.key}")
        by_key[r.key] = r
    joined = _Joined()
    for i, k in enumerate(table.keys):
        r = by_key.get(WindowKey(*k))
        if r is None:
            continue
        joined.keys.append(WindowKey(*k))
        joined.features.append(np.where(table.present[i], table.values[i], np.nan))
        joined.ratings.append([getattr(r, name) for name in RATINGS])
    if session_mode == "round-mean" and joined.keys:
        groups = defaultdict(list)
        for i, k in enumerate(joined.keys):
            groups[(k.subject_id, k.round, k.task)].append(i)
        merged = _Joined()
        for (sid, rnd, task), idx in sorted(groups.items()):
            f = np.array([joined.features[i] for i in idx])
            with np.errstate(all="ignore"):
                counts = np.isfinite(f).sum(axis=0)
                mean = np.where(counts > 0, np.nansum(f, axis=0) / np.maximum(counts, 1), np.nan)
            merged.keys.append(WindowKey(sid, 0, rnd, task))
            merged.features.append(mean)
            merged.ratings.append(list(np.mean([joined.ratings[i] for i in idx], axis=0)))
        joined = merged
    return joined


def correlate_scope(features: np.ndarray, ratings: np.ndarray, names: list) -> list:
    """58 x 3 grid of cells; missing features are dropped pairwise per cell."""
    return [[spearman(features[:, i], ratings[:, j]) for j in range(ratings.shape[1])]
            for i in range(len(names))]


def build_matrices(table, reports, session_mode: str = "sessions", tasks=TASKS) -> list:
    """One matrix per task x pooling scope, in task then pooling order."""
    if session_mode not in SESSION_MODES:
        raise ConfigError(f"unknown session mode {session_mode!r}; expected one of {SESSION_MODES}")
    joined = _join(table, list(reports), session_mode)
    names = list(table.names)
    features = np.array(joined.features, dtype=float).reshape(-1, len(names))
    ratings = np.array(joined.ratings, dtype=float).reshape(-1, len(RATINGS))
    out = []
    for task in tasks:
        for pooling in POOLINGS:
            rounds = POOLING_ROUNDS[pooling]
            rows = [i for i, k in enumerate(joined.keys)
                    if k.task == task and (rounds is None or k.round in rounds)]
            if not rows:
                log.warning("empty scope %s/%s: no joined rows, matrix fully masked", task, pooling)
                cells = [[CorrelationCell.masked_cell(0)] * len(RATINGS) for _ in names]
                out.append(CorrelationMatrix(task, pooling, names, cells, empty=True, session_mode=session_mode))
                continue
            cells = correlate_scope(features[rows], ratings[rows], names)
            out.append(CorrelationMatrix(task, pooling, names, cells, session_mode=session_mode))
    return out


def _fmt(x: float) -> str:
    return "" if not math.isfinite(x) else repr(round(float(x), 12))


def write_matrices_csv(path, matrices, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("# missing features are removed pairwise per cell; p values are uncorrected\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "pooling", "feature", "rating", "rho", "p", "n", "significant"])
        for m in matrices:
            for fname, row in zip(m.features, m.cells):
                for rating, c in zip(m.ratings, row):
                    w.writerow([m.task, m.pooling, fname, RATING_LABELS[rating], _fmt(c.rho), _fmt(c.p), c.n,
                                int(c.significant)])


def significant_summary(matrices) -> dict:
    """Significant cells per scope, in catalog and rating order."""
    out = {}
    for m in matrices:
        cells = []
        for fname, row in zip(m.features, m.cells):
            for rating, c in zip(m.ratings, row):
                if c.significant:
                    cells.append({"feature": fname, "rating": RATING_LABELS[rating],
                                  "rho": round(c.rho, 12), "p": round(c.p, 12), "n": c.n})
        out[f"{m.task}/{m.pooling}"] = {"empty": m.empty, "significant": cells}
    return out


def write_summary_json(path, matrices, extra: dict | None = None) -> None:
    payload = dict(extra or {})
    payload["scopes"] = significant_summary(matrices)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_matrices_csv(path) -> list:
    """Rebuild matrices from the CSV written by ``write_matrices_csv``."""
    labels = {v: k for k, v in RATING_LABELS.items()}
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    scopes = {}
    for r in rows:
        try:
            rho = float(r["rho"]) if r["rho"] else math.nan
            p = float(r["p"]) if r["p"] else math.nan
            cell = CorrelationCell(rho, p, int(r["n"]), r["significant"] == "1", not r["rho"])
            rating = labels[r["rating"]]
        except (KeyError, ValueError) as exc:
            raise IntegrityError(f"{path}: malformed matrix row {r}: {exc}")
        scopes.setdefault((r["task"], r["pooling"]), {}).setdefault(r["feature"], {})[rating] = cell
    out = []
    for (task, pooling), feats in scopes.items():
        names = list(feats)
        cells = [[feats[f][rating] for rating in RATINGS] for f in names]
        empty = all(c.masked and c.n == 0 for row in cells for c in row)
        out.append(CorrelationMatrix(task, pooling, names, cells, empty=empty))
    return out
