import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cafnet.errors import DataError
from cafnet.losses import compute_metrics, confidence_loss, depth_loss, smoothness_loss, total_loss

import oracles


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def test_depth_loss_exact_fit():
    d = t64(np.full((1, 1, 4, 4), 3.0))
    assert depth_loss(d, d, d).item() == 0.0


def test_depth_loss_single_pixel():
    assert depth_loss(t64([[6.0]]), t64([[7.0]]), t64([[5.0]]), m=0.5).item() == 2.5


def test_depth_loss_no_supervision():
    with pytest.raises(DataError, match="no supervision pixels"):
        depth_loss(t64([[1.0]]), t64([[1.0]]), t64([[0.0]]))


def test_depth_loss_matches_loop(rng):
    c, f = rng.uniform(1, 80, (2, 6, 9))
    t = np.where(rng.random((6, 9)) < 0.5, rng.uniform(1, 80, (6, 9)), 0.0)
    got = depth_loss(t64(c), t64(f), t64(t), 0.5).item()
    assert abs(got - oracles.depth_loss_loop(c, f, t, 0.5)) < 1e-10


def test_smoothness_constant_is_zero(rng):
    img = t64(rng.random((1, 3, 5, 7)))
    assert smoothness_loss(t64(np.full((1, 1, 5, 7), 4.0)), img).item() == 0.0


def test_smoothness_ramp():
    depth = t64(np.tile(np.arange(8.0), (5, 1))[None, None])
    img = t64(np.full((1, 3, 5, 8), 0.4))
    assert smoothness_loss(depth, img).item() == 1.0


def test_smoothness_matches_loop(rng):
    depth = rng.uniform(1, 30, (6, 7))
    img = rng.random((3, 6, 7))
    got = smoothness_loss(t64(depth[None, None]), t64(img[None])).item()
    assert abs(got - oracles.smoothness_loop(depth, img)) < 1e-10


def test_bce_perfect_prediction_bounded():
    c = t64([[0.0, 1.0], [1.0, 0.0]])
    loss = confidence_loss(c, c).item()
    assert 0 < loss < 2e-6
    assert abs(loss - (-math.log(1 - 1e-7))) < 1e-12


def test_bce_half_is_ln2(rng):
    c = t64((rng.random((4, 5)) < 0.5).astype(float))
    assert abs(confidence_loss(t64(np.full((4, 5), 0.5)), c).item() - math.log(2)) < 1e-12


def test_bce_matches_loop(rng):
    p, c = rng.random((5, 6)), (rng.random((5, 6)) < 0.3).astype(float)
    p[0, 0] = 0.0
    assert abs(confidence_loss(t64(p), t64(c)).item() - oracles.bce_loop(p, c)) < 1e-10


def test_total_loss():
    parts = total_loss(2.0, 10.0, 0.5, 1e-3)
    assert parts.total == 2.0 + 0.5 + 1e-3 * 10.0
    assert abs(parts.total - 2.51) < 1e-12
    assert total_loss(2.0, 10.0, 0.5, 0.0).total == 2.5
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 1.0, -1.0)


def test_losses_permutation_invariant(rng):
    c, f, t, p = rng.uniform(1, 80, (4, 40))
    conf_t = (rng.random(40) < 0.5).astype(float)
    p = p / 80
    perm = rng.permutation(40)
    assert abs(depth_loss(t64(c), t64(f), t64(t)).item() - depth_loss(t64(c[perm]), t64(f[perm]), t64(t[perm])).item()) < 1e-12
    assert abs(confidence_loss(t64(p), t64(conf_t)).item() - confidence_loss(t64(p[perm]), t64(conf_t[perm])).item()) < 1e-12


# --------------------------------------------------------------------------- metrics

def test_metrics_perfect(rng):
    g = rng.uniform(1, 80, (4, 4))
    r = compute_metrics(g, g, 80)
    assert (r.mae, r.rmse, r.absrel, r.log10, r.rmselog) == (0, 0, 0, 0, 0)
    assert (r.delta1, r.delta2, r.delta3) == (1, 1, 1)


def test_metrics_single_pixel():
    r = compute_metrics([[2.0]], [[1.0]], 80)
    assert r.mae == 1 and r.rmse == 1 and r.absrel == 1
    assert abs(r.log10 - 0.30103) < 1e-5 and abs(r.log10 - math.log10(2)) < 1e-12
    assert abs(r.rmselog - math.log10(2)) < 1e-12
    assert (r.delta1, r.delta2, r.delta3) == (0, 0, 0)


def test_metrics_empty():
    with pytest.raises(DataError):
        compute_metrics([[1.0]], [[90.0]], 80)


@pytest.mark.parametrize("cap", [50.0, 70.0, 80.0])
def test_metrics_match_loop(rng, cap):
    g = np.where(rng.random((10, 12)) < 0.6, rng.uniform(0.5, 90, (10, 12)), 0.0)
    d = rng.uniform(0.5, 90, (10, 12))
    r = compute_metrics(d, g, cap)
    want = oracles.metrics_loop(d, g, cap)
    for k, v in want.items():
        assert abs(getattr(r, k) - v) < 1e-9, k


def test_metrics_omega_shrinks_with_cap(rng):
    g = rng.uniform(1, 90, 200)
    counts = [compute_metrics(g, g, c).valid_pixel_count for c in (50, 70, 80)]
    assert counts == sorted(counts)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_inequalities(seed):
    r = np.random.default_rng(seed)
    g = r.uniform(0.1, 80, 30)
    d = g * np.exp(r.normal(0, r.uniform(0.01, 1.0), 30))
    rep = compute_metrics(d, g, 80)
    assert rep.mae <= rep.rmse + 1e-12
    assert rep.delta1 <= rep.delta2 <= rep.delta3 <= 1


def test_metrics_csv_row():
    row = compute_metrics([[2.0]], [[1.0]], 80).to_csv_row().split(",")
    assert len(row) == 10 and row[0] == "80.0" and row[-1] == "1"
