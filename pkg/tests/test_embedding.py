import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazepriv.core import VelocitySignal, position_to_velocity
from gazepriv.embedding import (BLOCKS, DIM, cosine_similarity, encode, encode_vjp, export_embeddings,
                                histogram_signature)
from gazepriv.embedding import _raw_features
from gazepriv.sim import SimConfig, simulate_window


def sim_velocity(seed=0, task="RAN"):
    return position_to_velocity(simulate_window(SimConfig(task=task), seed=seed).window)


def raw(v):
    return _raw_features(v.stacked if isinstance(v, VelocitySignal) else np.asarray(v))[0]


def test_dimension_and_norm():
    z = encode(sim_velocity())
    assert z.shape == (DIM,)
    assert abs(np.linalg.norm(z) - 1) < 1e-9
    assert np.all(np.isfinite(z))


def test_blocks_tile_the_vector():
    covered = sorted(i for sl in BLOCKS.values() for i in range(DIM)[sl])
    assert covered == list(range(DIM))


def test_deterministic():
    v = sim_velocity(1)
    assert encode(v).tobytes() == encode(v).tobytes()


def test_zero_velocity():
    z = np.zeros(5000)
    u = raw(VelocitySignal(z, z))
    speed = u[BLOCKS["speed_hist"]]
    assert speed[0] == 1.0 and speed[1:].sum() == 0
    assert np.all(u[BLOCKS["band_h"]] == 0) and np.all(u[BLOCKS["band_v"]] == 0)
    assert np.all(u[BLOCKS["direction_hist"]] == 0)
    assert abs(np.linalg.norm(encode(VelocitySignal(z, z))) - 1) < 1e-12


def test_time_reversal_blockwise():
    v = sim_velocity(2)
    rev = VelocitySignal(v.vx[::-1].copy(), v.vy[::-1].copy())
    a, b = raw(v), raw(rev)
    for name, sl in BLOCKS.items():
        np.testing.assert_allclose(b[sl], a[sl], atol=1e-12, err_msg=name)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_sample_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 60, (2, 2000))
    b = a[:, rng.permutation(2000)]
    ua, ub = raw(a), raw(b)
    for name in ("speed_hist", "direction_hist", "speed_quantiles"):
        np.testing.assert_allclose(ub[BLOCKS[name]], ua[BLOCKS[name]], atol=1e-12, err_msg=name)


def test_histograms_are_distributions():
    u = raw(sim_velocity(3))
    assert u[BLOCKS["speed_hist"]].sum() == pytest.approx(1.0)
    assert u[BLOCKS["direction_hist"]].sum() == pytest.approx(1.0)
    assert u[BLOCKS["accel_hist"]].sum() == pytest.approx(1.0)
    assert u[BLOCKS["band_h"]].sum() == pytest.approx(1.0)


def test_band_power_of_pure_tone_lands_in_its_band():
    t = np.arange(5000) / 1000
    u = raw(np.stack([30 * np.sin(2 * np.pi * 10 * t), np.zeros(5000)]))
    edges = np.geomspace(0.2, 250, 17)
    band = int(np.searchsorted(edges, 10.0) - 1)
    assert np.argmax(u[BLOCKS["band_h"]]) == band
    assert u[BLOCKS["band_h"]][band] > 0.9


def test_cosine_basics():
    a = encode(sim_velocity(4))
    assert cosine_similarity(a, a) == pytest.approx(1.0)
    e1, e2 = np.eye(DIM)[0], np.eye(DIM)[1]
    assert cosine_similarity(e1, e2) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_cosine_matches_loop_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, DIM))
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    loop = 0.0
    for x, y in zip(a, b):
        loop += float(x) * float(y)
    assert cosine_similarity(a, b) == pytest.approx(loop, abs=1e-12)
    assert cosine_similarity(a, b) == cosine_similarity(b, a)
    assert -1.0 <= cosine_similarity(a, b) <= 1.0


def test_different_subjects_less_similar_than_same_subject_windows():
    from gazepriv.sim import SubjectLatents
    slow = SubjectLatents("A", jitter_scale=0.5, drift_scale=0.5, tempo=1.3)
    fast = SubjectLatents("B", jitter_scale=2.0, drift_scale=2.0, tempo=0.7)
    w = lambda s, k: encode(position_to_velocity(simulate_window(SimConfig(task="RAN"), s, seed=k).window))
    same = cosine_similarity(w(slow, 1), w(slow, 2))
    cross = cosine_similarity(w(slow, 1), w(fast, 3))
    assert same > cross


def test_vjp_matches_finite_differences():
    rng = np.random.default_rng(5)
    v = sim_velocity(5).stacked[:, :512]
    gz = rng.standard_normal(DIM)
    z, vjp = encode_vjp(v)
    g = vjp(gz)
    sig = histogram_signature(v)
    h = 1e-6
    checked = 0
    for _ in range(40):
        c, i = int(rng.integers(2)), int(rng.integers(512))
        vp, vm = v.copy(), v.copy()
        vp[c, i] += h
        vm[c, i] -= h
        if histogram_signature(vp) != sig or histogram_signature(vm) != sig:
            continue
        num = (encode(vp) @ gz - encode(vm) @ gz) / (2 * h)
        assert abs(num - g[c, i]) <= 1e-5 * max(1.0, abs(num))
        checked += 1
    assert checked >= 20


def test_export_embeddings(tmp_path):
    z = encode(sim_velocity(6))
    export_embeddings(tmp_path / "e.csv", [("S1", 1, 2, "HSS", 0, z)], "seed=1")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "# seed=1"
    rows = list(csv.reader(lines[1:]))
    assert len(rows[0]) == 5 + DIM
    np.testing.assert_array_equal(np.array(rows[1][5:], dtype=float), z)
