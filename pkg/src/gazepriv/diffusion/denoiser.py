"""Small temporal-convolution noise predictor with hand-written backprop.

Arrays are channel-last inside the network: (batch, time, channels).

    input  = [x_t (2) | v0 (2) | z @ zin_w + zin_b (1)]
    h1     = silu(conv5(input) + time_emb(t) @ time_w + z @ zproj_w)
    h2     = silu(conv5(h1))
    h3     = silu(conv5(h2))
    eps    = h3 @ out_w + out_b
"""
from __future__ import annotations

import numpy as np

KERNEL = 5
HIDDEN = 32
TIME_DIM = 16
EMBED_DIM = 128
IN_CHANNELS = 5

PARAM_SHAPES = {
    "zin_w": (EMBED_DIM,),
    "zin_b": (),
    "conv1_w": (KERNEL, IN_CHANNELS, HIDDEN),
    "conv1_b": (HIDDEN,),
    "time_w": (TIME_DIM, HIDDEN),
    "zproj_w": (EMBED_DIM, HIDDEN),
    "conv2_w": (KERNEL, HIDDEN, HIDDEN),
    "conv2_b": (HIDDEN,),
    "conv3_w": (KERNEL, HIDDEN, HIDDEN),
    "conv3_b": (HIDDEN,),
    "out_w": (HIDDEN, 2),
    "out_b": (2,),
}


def time_embedding(t) -> np.ndarray:
    """Sinusoidal embedding, shape (len(t), 16)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    freqs = np.exp(-np.log(10000.0) * np.arange(TIME_DIM // 2) / (TIME_DIM // 2))
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    s = _sigmoid(x)
    return x * s, s


def _silu_grad(x, s):
    return s * (1.0 + x * (1.0 - s))


def _im2col(x):
    b, n, c = x.shape
    pad = KERNEL // 2
    xp = np.zeros((b, n + 2 * pad, c))
    xp[:, pad:pad + n] = x
    return np.concatenate([xp[:, j:j + n] for j in range(KERNEL)], axis=2)


def _col2im(dcols, c):
    b, n, _ = dcols.shape
    pad = KERNEL // 2
    dxp = np.zeros((b, n + 2 * pad, c))
    for j in range(KERNEL):
        dxp[:, j:j + n] += dcols[:, :, j * c:(j + 1) * c]
    return dxp[:, pad:pad + n]


def init_params(rng_seed: int = 0) -> dict:
    rng = np.random.default_rng(rng_seed)
    params = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
        params[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
    params["zin_w"] *= 0.1
    params["out_w"] *= 0.1
    return params


class ReferenceDenoiser:
    """eps_theta(x_t, t, cond) for two-channel velocity sequences of any length."""

    def __init__(self, params: dict | None = None, velocity_scale: float = 100.0):
        self.params = params if params is not None else init_params()
        missing = set(PARAM_SHAPES) - set(self.params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        self.velocity_scale = float(velocity_scale)

    def __call__(self, xt, t, cond) -> np.ndarray:
        """Single-sequence call in the (2, n) layout used by the sampler."""
        out, _ = self.forward(np.asarray(xt)[None].transpose(0, 2, 1), np.array([t]),
                              cond.v0[None].transpose(0, 2, 1), cond.z[None])
        return out[0].T

    def forward(self, x, t, v0, z):
        """x, v0: (B, n, 2); t: (B,); z: (B, 128). Returns (eps_hat, cache)."""
        p = self.params
        b, n, _ = x.shape
        zc = z @ p["zin_w"] + p["zin_b"]
        inp = np.concatenate([x, v0, np.broadcast_to(zc[:, None, None], (b, n, 1))], axis=2)
        cols1 = _im2col(inp)
        temb = time_embedding(t)
        cond_bias = temb @ p["time_w"] + z @ p["zproj_w"]
        a1 = cols1 @ p["conv1_w"].reshape(-1, HIDDEN) + p["conv1_b"] + cond_bias[:, None, :]
        h1, s1 = _silu(a1)
        cols2 = _im2col(h1)
        a2 = cols2 @ p["conv2_w"].reshape(-1, HIDDEN) + p["conv2_b"]
        h2, s2 = _silu(a2)
        cols3 = _im2col(h2)
        a3 = cols3 @ p["conv3_w"].reshape(-1, HIDDEN) + p["conv3_b"]
        h3, s3 = _silu(a3)
        out = h3 @ p["out_w"] + p["out_b"]
        cache = (z, temb, cols1, a1, s1, cols2, a2, s2, cols3, a3, s3, h3)
        return out, cache

    def backward(self, cache, dout) -> dict:
        """Gradients of sum(dout * eps_hat) with respect to every parameter."""
        p = self.params
        z, temb, cols1, a1, s1, cols2, a2, s2, cols3, a3, s3, h3 = cache
        g = {}
        flat = lambda a: a.reshape(-1, a.shape[-1])
        g["out_w"] = flat(h3).T @ flat(dout)
        g["out_b"] = dout.sum(axis=(0, 1))
        da3 = (dout @ p["out_w"].T) * _silu_grad(a3, s3)
        g["conv3_w"] = (flat(cols3).T @ flat(da3)).reshape(PARAM_SHAPES["conv3_w"])
        g["conv3_b"] = da3.sum(axis=(0, 1))
        dh2 = _col2im(da3 @ p["conv3_w"].reshape(-1, HIDDEN).T, HIDDEN)
        da2 = dh2 * _silu_grad(a2, s2)
        g["conv2_w"] = (flat(cols2).T @ flat(da2)).reshape(PARAM_SHAPES["conv2_w"])
        g["conv2_b"] = da2.sum(axis=(0, 1))
        dh1 = _col2im(da2 @ p["conv2_w"].reshape(-1, HIDDEN).T, HIDDEN)
        da1 = dh1 * _silu_grad(a1, s1)
        g["conv1_w"] = (flat(cols1).T @ flat(da1)).reshape(PARAM_SHAPES["conv1_w"])
        g["conv1_b"] = da1.sum(axis=(0, 1))
        dbias = da1.sum(axis=1)
        g["time_w"] = temb.T @ dbias
        g["zproj_w"] = z.T @ dbias
        dinp = _col2im(da1 @ p["conv1_w"].reshape(-1, HIDDEN).T, IN_CHANNELS)
        dzc = dinp[:, :, 4].sum(axis=1)
        g["zin_w"] = z.T @ dzc
        g["zin_b"] = np.asarray(dzc.sum())
        return g

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())
