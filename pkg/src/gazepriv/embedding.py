"""Deterministic 128-d user embedding built from velocity statistics.

Layout (block: width):
    speed histogram        32   log bins over [0.1, 1000] deg/s
    direction histogram    16   over [-pi, pi), moving samples only
    horizontal band power  16   log bands over [0.2, 250] Hz
    vertical band power    16
    acceleration histogram 32   log bins over [10, 1e6] deg/s^2
    speed quantiles        16   log10(1 + q) / 3

Histogram blocks are piecewise constant in the input, so their derivative
is zero almost everywhere; ``encode_vjp`` differentiates the spectral and
quantile blocks only.
"""
from __future__ import annotations

import csv
import logging
from functools import lru_cache

import numpy as np

from .core import DT_S, VelocitySignal

log = logging.getLogger(__name__)

DIM = 128
BLOCKS = {
    "speed_hist": slice(0, 32),
    "direction_hist": slice(32, 48),
    "band_h": slice(48, 64),
    "band_v": slice(64, 80),
    "accel_hist": slice(80, 112),
    "speed_quantiles": slice(112, 128),
}
SPEED_EDGES_LOG = np.linspace(-1.0, 3.0, 33)
ACCEL_EDGES_LOG = np.linspace(1.0, 6.0, 33)
BAND_EDGES_HZ = np.geomspace(0.2, 250.0, 17)
QUANTILE_PROBS = (np.arange(16) + 0.5) / 16
MIN_MOVING_SPEED = 0.1


def _as_array(v) -> np.ndarray:
    if isinstance(v, VelocitySignal):
        return v.stacked
    return np.asarray(v, dtype=float)


def _log_hist(values, edges_log):
    """Fractions per log-spaced bin; out-of-range values land in the end bins."""
    lo, hi = edges_log[0], edges_log[-1]
    lv = np.log10(np.maximum(values, 10.0 ** lo))
    idx = np.clip(((lv - lo) / (hi - lo) * (len(edges_log) - 1)).astype(int), 0, len(edges_log) - 2)
    return np.bincount(idx, minlength=len(edges_log) - 1) / max(len(values), 1)


@lru_cache(maxsize=16)
def _band_masks(n):
    freqs = np.fft.rfftfreq(n, DT_S)
    masks = []
    for i in range(16):
        lo, hi = BAND_EDGES_HZ[i], BAND_EDGES_HZ[i + 1]
        upper = freqs <= hi if i == 15 else freqs < hi
        masks.append((freqs >= lo) & upper)
    masks = np.array(masks, dtype=float)
    return masks, masks.any(axis=0).astype(float)


def _band_powers(ch):
    n = len(ch)
    window = np.hanning(n)
    spectrum = np.fft.rfft(window * (ch - ch.mean()))
    power = spectrum.real ** 2 + spectrum.imag ** 2
    masks, inband = _band_masks(n)
    energy = masks @ power
    total = float(inband @ power)
    bands = energy / total if total > 0 else np.zeros(16)
    return bands, (spectrum, window, masks, inband, energy, total)


def _band_vjp(g_bands, cache):
    spectrum, window, masks, inband, energy, total = cache
    n = len(window)
    if total <= 0:
        return np.zeros(n)
    c = (g_bands @ masks) / total - (g_bands @ energy) / total ** 2 * inband
    full = np.zeros(n, dtype=complex)
    full[: len(spectrum)] = c * spectrum
    gy = 2.0 * np.real(np.fft.ifft(full)) * n
    gx = window * gy
    return gx - gx.mean()


def _speed_quantiles(speed):
    order = np.argsort(speed, kind="stable")
    s = speed[order]
    h = (len(s) - 1) * QUANTILE_PROBS
    lo = np.floor(h).astype(int)
    hi = np.minimum(lo + 1, len(s) - 1)
    frac = h - lo
    q = s[lo] + frac * (s[hi] - s[lo])
    return np.log10(1.0 + q) / 3.0, (order, lo, hi, frac, q)


def _raw_features(a):
    vx, vy = a
    speed = np.hypot(vx, vy)
    u = np.zeros(DIM)
    u[BLOCKS["speed_hist"]] = _log_hist(speed, SPEED_EDGES_LOG)
    moving = speed >= MIN_MOVING_SPEED
    if moving.any():
        ang = np.arctan2(vy[moving], vx[moving])
        idx = np.clip(((ang + np.pi) / (2 * np.pi) * 16).astype(int), 0, 15)
        u[BLOCKS["direction_hist"]] = np.bincount(idx, minlength=16) / moving.sum()
    bh, cache_h = _band_powers(vx)
    bv, cache_v = _band_powers(vy)
    u[BLOCKS["band_h"]] = bh
    u[BLOCKS["band_v"]] = bv
    accel = np.hypot(np.diff(vx), np.diff(vy)) / DT_S
    u[BLOCKS["accel_hist"]] = _log_hist(accel, ACCEL_EDGES_LOG)
    qs, cache_q = _speed_quantiles(speed)
    u[BLOCKS["speed_quantiles"]] = qs
    return u, (speed, cache_h, cache_v, cache_q)


def _normalize(u):
    norm = float(np.linalg.norm(u))
    if norm == 0.0 or not np.isfinite(norm):
        log.warning("degenerate embedding input; using the e1 fallback vector")
        z = np.zeros(DIM)
        z[0] = 1.0
        return z, 0.0
    return u / norm, norm


def encode(v) -> np.ndarray:
    """Unit-norm 128-d descriptor of a velocity signal (deg/s)."""
    a = _as_array(v)
    u, _ = _raw_features(a)
    return _normalize(u)[0]


def encode_vjp(v):
    """Return ``(z, vjp)`` where ``vjp(gz)`` maps dL/dz to dL/dv (shape (2, n))."""
    a = _as_array(v)
    vx, vy = a
    u, (speed, cache_h, cache_v, cache_q) = _raw_features(a)
    z, norm = _normalize(u)

    def vjp(gz):
        gz = np.asarray(gz, dtype=float)
        if norm == 0.0:
            return np.zeros_like(a)
        gu = (gz - (gz @ z) * z) / norm
        gx = _band_vjp(gu[BLOCKS["band_h"]], cache_h)
        gy = _band_vjp(gu[BLOCKS["band_v"]], cache_v)
        order, lo, hi, frac, q = cache_q
        gq = gu[BLOCKS["speed_quantiles"]] / ((1.0 + q) * np.log(10.0) * 3.0)
        g_sorted = np.zeros(len(speed))
        np.add.at(g_sorted, lo, gq * (1.0 - frac))
        np.add.at(g_sorted, hi, gq * frac)
        g_speed = np.empty_like(g_sorted)
        g_speed[order] = g_sorted
        with np.errstate(invalid="ignore", divide="ignore"):
            ux = np.where(speed > 0, vx / speed, 0.0)
            uy = np.where(speed > 0, vy / speed, 0.0)
        return np.stack([gx + g_speed * ux, gy + g_speed * uy])

    return z, vjp


def cosine_similarity(a, b) -> float:
    """Dot product of two unit vectors, clipped to [-1, 1]."""
    return float(np.clip(np.dot(np.asarray(a, float), np.asarray(b, float)), -1.0, 1.0))


def histogram_signature(v) -> tuple:
    """Bin occupancy of the piecewise-constant blocks; used to detect bin crossings."""
    u, _ = _raw_features(_as_array(v))
    return signature_of(u)


def signature_of(u) -> tuple:
    return tuple(np.round(np.r_[u[:48], u[80:112]] * 1e9).astype(np.int64))


def encode_with_signature(v):
    u, _ = _raw_features(_as_array(v))
    return _normalize(u)[0], signature_of(u)


def export_embeddings(path, rows, comment: str | None = None) -> None:
    """Write ``(subject, session, round, task, window_index, z)`` rows as CSV."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "session", "round", "task", "window_index"]
                   + [f"z{i:03d}" for i in range(DIM)])
        for subject, session, rnd, task, index, z in rows:
            w.writerow([subject, session, rnd, task, index] + [repr(float(c)) for c in z])

