from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conet.errors import ConsistencyError, InputError
from conet.lowrank import (UNDEFINED, LayerMetrics, LayerMetricsHistory, LowRankFactorization,
                           append_metrics_csv, condition_measure, evb_tau_threshold,
                           layer_metrics, plateau_epoch, rank_measure, rank_slope,
                           vbmf_factorize)
from conet.oracle import grid_argmin, vb_free_energy_oracle
from conet.tensor import ConvTensor, svd, unfold


def planted(rows, cols, rank, noise, seed, amplitude=10.0):
    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(rng.standard_normal((rows, rows)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, cols)))
    signal = sum(amplitude * (1 + 0.3 * k) * np.outer(u[:, k], v[:, k]) for k in range(rank))
    return signal + noise * rng.standard_normal((rows, cols))


def fact(values):
    return LowRankFactorization(tuple(values), len(values), 1.0)


def history(ranks):
    return LayerMetricsHistory(tuple(LayerMetrics(r, r, r, 1.0, 1.0, 1.0) for r in ranks))


# --- factorization -----------------------------------------------------------

def test_zero_matrix_retains_nothing():
    f = vbmf_factorize(np.zeros((8, 8)))
    assert (f.estimated_rank, f.noise_variance, f.retained_values) == (0, 0.0, ())


def test_planted_rank_two_agrees_with_oracle():
    rng = np.random.default_rng(0)
    u, _ = np.linalg.qr(rng.standard_normal((20, 2)))
    v, _ = np.linalg.qr(rng.standard_normal((30, 2)))
    m = 10 * np.outer(u[:, 0], v[:, 0]) + 10 * np.outer(u[:, 1], v[:, 1])
    m += 0.01 * rng.standard_normal((20, 30))
    f = vbmf_factorize(m)
    assert f.estimated_rank == 2
    assert grid_argmin(svd(m), (20, 30))[0] == 2


def test_pure_noise_retains_almost_nothing():
    for seed in range(20):
        m = np.random.default_rng(seed).standard_normal((20, 30))
        assert vbmf_factorize(m).estimated_rank <= 2


def test_retained_values_are_shrunk_and_sorted():
    m = planted(15, 25, 3, 0.1, 3)
    f = vbmf_factorize(m)
    s = svd(m).values
    assert f.estimated_rank == 3
    assert list(f.retained_values) == sorted(f.retained_values, reverse=True)
    assert all(0 < r < o for r, o in zip(f.retained_values, s))


def test_transpose_invariance():
    m = planted(12, 20, 2, 0.1, 4)
    a, b = vbmf_factorize(m), vbmf_factorize(m.T)
    assert a.estimated_rank == b.estimated_rank
    assert np.allclose(a.retained_values, b.retained_values)


def test_tau_threshold_root():
    for alpha in (0.1, 0.5, 1.0):
        t = evb_tau_threshold(alpha)
        assert t > math.sqrt(alpha)
        assert abs(math.log1p(t) + alpha * math.log1p(t / alpha) - t) < 1e-12
    # the closed-form approximation quoted for the threshold
    assert evb_tau_threshold(1.0) == pytest.approx(2.5129, abs=1e-3)


@given(st.integers(3, 16), st.integers(3, 16), st.integers(0, 4),
       st.sampled_from([0.01, 0.1, 1.0]), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_analytic_rank_matches_grid_oracle(rows, cols, rank, noise, seed):
    assume(rank <= min(rows, cols))
    m = planted(rows, cols, rank, noise, seed)
    spec = svd(m)
    f = vbmf_factorize(spec)
    oracle_rank, oracle_s2, oracle_f = grid_argmin(spec, spec.shape, n_grid=4000)
    assert abs(f.estimated_rank - oracle_rank) <= 1
    if f.estimated_rank > 0:
        ours = vb_free_energy_oracle(spec, spec.shape, f.estimated_rank, f.noise_variance)
        assert ours <= oracle_f + 1e-6 * abs(oracle_f)


def test_rank_is_the_free_energy_minimizer_at_the_estimated_noise():
    m = planted(20, 30, 3, 0.5, 7)
    spec = svd(m)
    f = vbmf_factorize(spec)
    energies = [vb_free_energy_oracle(spec, spec.shape, h, f.noise_variance) for h in range(21)]
    assert int(np.argmin(energies)) == f.estimated_rank


def test_oracle_rejects_bad_candidates():
    spec = svd(np.eye(3))
    with pytest.raises(InputError):
        vb_free_energy_oracle(spec, (3, 3), 1, 0.0)
    with pytest.raises(InputError):
        vb_free_energy_oracle(spec, (3, 3), 4, 1.0)
    assert math.isfinite(vb_free_energy_oracle(svd(np.zeros((3, 3))), (3, 3), 0, 1.0))


# --- metrics -----------------------------------------------------------------

def test_rank_measure_examples():
    assert rank_measure(fact([1.0] * 16), 32) == 0.5
    assert rank_measure(fact([]), 32) == 0.0
    assert rank_measure(fact([1.0] * 7), 7) == 1.0
    with pytest.raises(ConsistencyError):
        rank_measure(fact([1.0] * 3), 2)
    with pytest.raises(InputError):
        rank_measure(fact([]), 0)


def test_condition_measure_examples():
    assert condition_measure(fact([5.0, 1.0])) == 5.0
    assert condition_measure(fact([3.0])) == 1.0
    assert condition_measure(fact([])) == UNDEFINED


def test_factorization_invariants_enforced():
    with pytest.raises(ConsistencyError):
        LowRankFactorization((1.0,), 2, 1.0)
    with pytest.raises(ConsistencyError):
        LowRankFactorization((1.0, 0.0), 2, 1.0)


def test_layer_metrics_zero_tensor():
    m = layer_metrics(ConvTensor(np.zeros((3, 3, 4, 6))))
    assert (m.rank_in, m.rank_out, m.rank_avg) == (0, 0, 0)
    assert m.cond_avg == UNDEFINED


def test_layer_metrics_planted_output_rank():
    rng = np.random.default_rng(2)
    w4 = planted(8, 3 * 3 * 6, 2, 0.01, 5)  # mode-4 unfolding, rank 2
    w = np.transpose(w4.reshape(8, 3, 3, 6), (1, 2, 3, 0))
    m = layer_metrics(ConvTensor(w))
    assert m.rank_out == 2 / 8
    assert m.rank_avg == (m.rank_in + m.rank_out) / 2
    del rng


def test_symmetric_spectra_give_equal_ranks():
    base = planted(5, 5, 2, 0.01, 1)
    w = base.reshape(1, 1, 5, 5)
    w = (w + np.transpose(w, (0, 1, 3, 2))) / 2
    m = layer_metrics(ConvTensor(w))
    assert m.rank_in == m.rank_out


@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_metric_ranges(cin, cout, seed):
    w = np.random.default_rng(seed).standard_normal((3, 3, cin, cout))
    w[..., 0] *= 20
    m = layer_metrics(ConvTensor(w))
    for r in (m.rank_in, m.rank_out, m.rank_avg):
        assert 0 <= r <= 1
    for c in (m.cond_in, m.cond_out, m.cond_avg):
        assert c == UNDEFINED or c >= 1
    assert m.rank_avg == (m.rank_in + m.rank_out) / 2


@given(st.floats(0.1, 100), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_scaling_scales_retained_values(c, seed):
    m = planted(10, 14, 3, 0.05, seed)
    a, b = vbmf_factorize(m), vbmf_factorize(c * m)
    assume(a.estimated_rank == b.estimated_rank)
    assert np.allclose(np.array(b.retained_values), c * np.array(a.retained_values), rtol=1e-6)
    if a.estimated_rank:
        assert condition_measure(a) == pytest.approx(condition_measure(b), rel=1e-6)


# --- rank-slope and plateau ----------------------------------------------------

def test_plateau_examples():
    assert plateau_epoch(history([0.1, 0.3, 0.5, 0.5, 0.5]), window=2, epsilon=0.001) == 4
    assert plateau_epoch(history([0.1, 0.2, 0.3, 0.4, 0.5])) == 4
    assert plateau_epoch(history([0.4] * 10), window=3) == 3
    with pytest.raises(InputError):
        plateau_epoch(history([0.1]))


@given(st.lists(st.floats(0, 1), min_size=2, max_size=25), st.floats(1e-4, 0.1),
       st.floats(1e-4, 0.1), st.integers(1, 5))
def test_plateau_monotone_in_epsilon(ranks, e1, e2, window):
    lo, hi = sorted((e1, e2))
    h = history(ranks)
    assert plateau_epoch(h, window, hi) <= plateau_epoch(h, window, lo)


def test_rank_slope_examples():
    ranks = [0.1] + [0.3] * 9 + [0.6]
    assert rank_slope(history(ranks), 0, 10) == pytest.approx(0.05)
    assert rank_slope(history([0.4] * 5), 0, 4) == 0
    wobbly = [0.2] + [0.9, 0.1] * 9 + [0.5, 0.2]
    assert rank_slope(history(wobbly), 0, 20) == 0
    with pytest.raises(InputError):
        rank_slope(history([0.1, 0.2]), 1, 1)
    with pytest.raises(InputError):
        rank_slope(history([0.1, 0.2]), 0, 2)


@given(st.floats(0, 0.5), st.floats(0, 0.25), st.integers(1, 10))
def test_rank_slope_linear_in_gain(r0, gain, t2):
    a = history([r0] * t2 + [r0 + gain])
    b = history([r0] * t2 + [r0 + 2 * gain])
    assert rank_slope(b, 0, t2) == pytest.approx(2 * rank_slope(a, 0, t2), abs=1e-15)


def test_metrics_csv_format(tmp_path):
    path = tmp_path / "metrics.csv"
    h = LayerMetricsHistory((LayerMetrics(0.0, 0.25, 0.125, UNDEFINED, 1.5, 1.5),
                             LayerMetrics(0.5, 0.5, 0.5, 2.0, 1 / 3, 1.0)))
    append_metrics_csv(path, 0, {"conv1": h})
    append_metrics_csv(path, 1, {"conv1": h})
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["trial", "epoch", "layer_name", "rank_in", "rank_out", "rank_avg",
                       "cond_in", "cond_out", "cond_avg"]
    assert len(rows) == 5
    assert rows[1] == ["0", "0", "conv1", "0", "0.25", "0.125", "inf", "1.5", "1.5"]
    assert rows[2][7] == "0.333333333"
