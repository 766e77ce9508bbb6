"""Training loop (Adam on the combined loss) and conditioned synthesis."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..core import GazeWindow, identity_removal, position_to_velocity, window_from_velocity
from ..embedding import encode, encode_vjp, encode_with_signature
from ..errors import ConfigError, NumericError
from .denoiser import ReferenceDenoiser, init_params
from .process import Conditioning, NoiseSchedule, linear_schedule, sample

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    learning_rate: float = 2e-4
    batch_size: int = 32
    epochs: int = 450
    lam: float = 0.1
    rng_seed: int = 0
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.05
    variance: str = "beta_tilde"
    velocity_scale: float = 100.0
    chunk: int = 8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.variance not in ("beta", "beta_tilde"):
            raise ConfigError(f"unknown reverse variance {self.variance!r}")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainingConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Batch:
    """Channel-last tensors for one mini-batch; ``x0`` is in scaled units."""

    x0: np.ndarray
    v0: np.ndarray
    z: np.ndarray
    t: np.ndarray
    eps: np.ndarray

    def __len__(self):
        return len(self.t)


@dataclass
class TrainResult:
    model: ReferenceDenoiser
    epoch_loss: list = field(default_factory=list)
    batch_loss: list = field(default_factory=list)


def prepare(windows, velocity_scale: float):
    """Stack scaled velocity, v0 and z for every window."""
    x0, v0, z = [], [], []
    for w in windows:
        v = position_to_velocity(w)
        x0.append(v.stacked.T / velocity_scale)
        v0.append(identity_removal(v).stacked.T)
        z.append(encode(v))
    return np.array(x0), np.array(v0), np.array(z)


def batch_loss(model: ReferenceDenoiser, batch: Batch, sched: NoiseSchedule, lam: float,
               with_grad: bool = True, chunk: int = 8, signatures: list | None = None):
    """Mean combined loss over the batch and, optionally, its parameter gradient.

    When ``signatures`` is a list (no-gradient path only) the embedding
    histogram occupancy of every reconstructed v_hat is appended to it.
    """
    b = len(batch)
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()} if with_grad else None
    scale = model.velocity_scale
    for lo in range(0, b, chunk):
        sl = slice(lo, min(lo + chunk, b))
        t = batch.t[sl]
        ab = sched.alpha_bar[t - 1][:, None, None]
        xt = np.sqrt(ab) * batch.x0[sl] + np.sqrt(1.0 - ab) * batch.eps[sl]
        eps_hat, cache = model.forward(xt, t, batch.v0[sl], batch.z[sl])
        diff = eps_hat - batch.eps[sl]
        per_elem = diff[0].size
        total += float(np.sum(diff ** 2)) / per_elem
        d_eps_hat = 2.0 * diff / per_elem
        if lam:
            v_hat = scale * (xt - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
            for i in range(len(t)):
                z_target = batch.z[sl][i]
                if not with_grad:
                    z_hat, sig = encode_with_signature(v_hat[i].T)
                    total += lam * (1.0 - float(z_hat @ z_target))
                    if signatures is not None:
                        signatures.append(sig)
                    continue
                z_hat, vjp = encode_vjp(v_hat[i].T)
                total += lam * (1.0 - float(z_hat @ z_target))
                coef = lam * scale * np.sqrt(1.0 - ab[i, 0, 0]) / np.sqrt(ab[i, 0, 0])
                d_eps_hat[i] += coef * vjp(z_target).T
        if with_grad:
            for k, g in model.backward(cache, d_eps_hat / b).items():
                grads[k] += g
    return total / b, grads


class Adam:
    def __init__(self, params: dict, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(windows, cfg: TrainingConfig, params: dict | None = None) -> TrainResult:
    """Mini-batch Adam on the combined loss. Deterministic given ``cfg.rng_seed``."""
    windows = list(windows)
    if len(windows) < cfg.batch_size:
        raise ConfigError(f"need at least batch_size={cfg.batch_size} windows, got {len(windows)}")
    sched = cfg.schedule()
    rng = np.random.default_rng(cfg.rng_seed)
    if params is None:
        params = init_params(int(rng.integers(2 ** 31)))
    model = ReferenceDenoiser({k: v.copy() for k, v in params.items()}, cfg.velocity_scale)
    result = TrainResult(model)
    if cfg.epochs == 0:
        return result
    x0, v0, z = prepare(windows, cfg.velocity_scale)
    opt = Adam(model.params, cfg.learning_rate)
    batch_index = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(windows))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal(x0[idx].shape)
            value, grads = batch_loss(model, Batch(x0[idx], v0[idx], z[idx], t, eps), sched,
                                      cfg.lam, chunk=cfg.chunk)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError(f"non-finite loss at batch {batch_index} (epoch {epoch})")
            opt.step(model.params, grads)
            losses.append(value)
            result.batch_loss.append(value)
            batch_index += 1
        result.epoch_loss.append(float(np.mean(losses)))
        log.info("epoch %d mean loss %.6f", epoch, result.epoch_loss[-1])
    return result


def _loss_and_bins(model: ReferenceDenoiser, batch: Batch, sched: NoiseSchedule, lam: float):
    sigs = []
    value = batch_loss(model, batch, sched, lam, with_grad=False, signatures=sigs)[0]
    return value, sigs


def finite_difference_grads(model: ReferenceDenoiser, batch: Batch, sched: NoiseSchedule, lam: float,
                            h: float = 1e-5, max_shrink: int = 3) -> dict:
    """Central-difference estimate of d(batch loss)/d(parameter) for every entry.

    Uses only forward evaluations. The embedding histograms are piecewise
    constant, so a perturbation that moves a sample across a bin edge makes
    the loss jump; such entries are retried with a tenfold smaller step
    until both sides keep the unperturbed bin occupancy.
    """
    _, base_bins = _loss_and_bins(model, batch, sched, lam)
    numeric = {}
    for name, p in model.params.items():
        out = np.zeros_like(p)
        for index in np.ndindex(p.shape):
            original = p[index]
            step = h
            for attempt in range(max_shrink + 1):
                p[index] = original + step
                plus, bins_plus = _loss_and_bins(model, batch, sched, lam)
                p[index] = original - step
                minus, bins_minus = _loss_and_bins(model, batch, sched, lam)
                if bins_plus == base_bins == bins_minus or attempt == max_shrink:
                    break
                step /= 10
            p[index] = original
            out[index] = (plus - minus) / (2 * step)
        numeric[name] = out
    return numeric


def synthesize_window(model: ReferenceDenoiser, window: GazeWindow, sched: NoiseSchedule,
                      seed: int, variance: str = "beta_tilde") -> GazeWindow:
    """Sample a synthetic window conditioned on ``window``'s v0 and embedding."""
    v = position_to_velocity(window)
    cond = Conditioning(identity_removal(v), encode(v))
    v_hat = sample(model, cond, sched, seed, scale=model.velocity_scale, variance=variance)
    return window_from_velocity(v_hat, window)
