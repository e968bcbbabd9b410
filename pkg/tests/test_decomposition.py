import math

import numpy as np
import pytest

from ropeslr.decomposition import (
    AttentionMatrix,
    background_inf_norm,
    energy_split,
    row_energy_split,
    softmax_attention,
    synthetic_attention,
    synthetic_qk,
    theorem_scaling_sweep,
    verify_sparsity_bound,
)
from ropeslr.rope3d import GridShape, RopeConfig

CFG = RopeConfig(4, 4, 4)


def manual_attention(a):
    a = np.asarray(a, dtype=np.float64)
    return AttentionMatrix(a=a, log_z=np.zeros(a.shape[0]))


def test_softmax_uniform_row():
    attn = softmax_attention(np.zeros((4, 4)))
    np.testing.assert_allclose(attn.a, np.full((4, 4), 0.25), rtol=0, atol=1e-15)
    np.testing.assert_allclose(attn.z, np.full(4, 4.0), rtol=1e-12)


def test_softmax_large_logits_stable():
    s = np.array([[1000.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    attn = softmax_attention(s)
    assert np.all(np.isfinite(attn.a))
    assert attn.a[0, 0] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(attn.a.sum(axis=1), np.ones(3), rtol=0, atol=1e-9)


def test_softmax_row_stochastic_across_scales():
    rng = np.random.default_rng(0)
    base = rng.standard_normal((6, 6))
    for scale in (1.0, 10.0, 1e3):
        attn = softmax_attention(scale * base)
        np.testing.assert_allclose(attn.a.sum(axis=1), np.ones(6), rtol=0, atol=1e-9)
        assert np.all(attn.a >= 0)


def test_softmax_against_mpmath():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 60
    rng = np.random.default_rng(1)
    s = rng.standard_normal((5, 5)) * 3.0
    attn = softmax_attention(s)
    for i in range(5):
        exps = [mp.e ** mp.mpf(v) for v in s[i]]
        z = sum(exps)
        for j in range(5):
            assert abs(attn.a[i, j] - float(exps[j] / z)) <= 1e-12


def test_softmax_rejects_bad_input():
    with pytest.raises(ValueError):
        softmax_attention(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        softmax_attention(np.array([[np.nan, 0.0], [0.0, 0.0]]))


def test_energy_split_no_spikes_when_tau_above_max():
    attn = softmax_attention(np.random.default_rng(2).standard_normal((5, 5)))
    tau = float(attn.a.max()) + 0.01
    dec = energy_split(attn, min(tau, 0.99))
    assert dec.nnz == 0
    np.testing.assert_array_equal(dec.a_bg, attn.a)
    np.testing.assert_array_equal(dec.a_sparse, np.zeros_like(attn.a))


def test_energy_split_one_hot_rows():
    s = np.full((4, 4), -30.0)
    np.fill_diagonal(s, 30.0)
    dec = energy_split(softmax_attention(s), 0.5)
    assert dec.nnz == 4
    assert np.all(dec.spike_mask.sum(axis=1) == 1)


def test_energy_split_exact_recomposition():
    attn = synthetic_attention(GridShape(4, 4, 4), CFG, 3)
    dec = energy_split(attn, 0.05)
    np.testing.assert_array_equal(dec.a_sparse + dec.a_bg, attn.a)
    assert not np.any(dec.spike_mask & (dec.a_bg != 0))


def test_energy_split_tie_goes_to_background():
    attn = manual_attention([[0.5, 0.5], [0.25, 0.75]])
    dec = energy_split(attn, 0.5)
    assert not dec.spike_mask[0].any()  # both entries equal tau exactly
    assert dec.spike_mask[1, 1] and dec.nnz == 1


def test_energy_split_tau_out_of_range():
    attn = manual_attention(np.eye(2))
    for tau in (0.0, 1.0, -0.3):
        with pytest.raises(ValueError):
            energy_split(attn, tau)


def test_sparsity_bound_value():
    attn = manual_attention(np.eye(3))
    rep = verify_sparsity_bound(energy_split(attn, 0.3))
    assert rep.bound == 3 and rep.holds


def test_sparsity_bound_uniform_attention_has_no_spikes():
    attn = softmax_attention(np.zeros((10, 10)))
    dec = energy_split(attn, 0.2)
    rep = verify_sparsity_bound(dec)
    assert rep.max_row_nnz == 0 and rep.holds


def test_sparsity_and_background_bounds_random_sweep():
    rng = np.random.default_rng(4)
    for trial in range(100):
        attn = softmax_attention(rng.standard_normal((32, 32)) * rng.uniform(0.5, 4.0))
        tau = float(rng.uniform(0.05, 0.5))
        dec = energy_split(attn, tau)
        assert verify_sparsity_bound(dec).holds
        assert background_inf_norm(dec) <= tau


def test_background_inf_norm_no_spikes_equals_global_max():
    attn = softmax_attention(np.random.default_rng(5).standard_normal((6, 6)))
    dec = energy_split(attn, 0.999)
    assert background_inf_norm(dec) == float(attn.a.max())


def test_background_inf_norm_one_hot_spike_rows_contribute_zero():
    s = np.full((3, 3), -40.0)
    np.fill_diagonal(s, 40.0)
    dec = energy_split(softmax_attention(s), 0.5)
    assert background_inf_norm(dec) <= 1e-15


def test_row_energy_split_one_hot():
    attn = manual_attention(np.eye(4))
    split = row_energy_split(attn, 0.9)
    assert split.retained_count == 4
    np.testing.assert_array_equal(split.keep_mask, np.eye(4, dtype=bool))


def test_row_energy_split_uniform_by_hand():
    attn = manual_attention(np.full((1, 10), 0.1))
    split = row_energy_split(attn, 0.9)
    assert split.retained_count == 9


def test_row_energy_split_recomposition_and_tie_break():
    attn = manual_attention([[0.4, 0.4, 0.2]])
    split = row_energy_split(attn, 0.4)
    # equal tied entries resolve to the lower column index
    np.testing.assert_array_equal(split.keep_mask, [[True, False, False]])
    np.testing.assert_array_equal(split.retained + split.residual, attn.a)


def test_row_energy_split_random_recomposition():
    attn = synthetic_attention(GridShape(3, 3, 3), CFG, 6)
    split = row_energy_split(attn, 0.9)
    np.testing.assert_array_equal(split.retained + split.residual, attn.a)
    assert not np.any(split.keep_mask & (split.residual != 0))


def test_row_energy_split_rejects_bad_fraction():
    attn = manual_attention(np.eye(2))
    with pytest.raises(ValueError):
        row_energy_split(attn, 1.0)


def test_synthetic_qk_row_norms():
    grid = GridShape(3, 2, 2)
    q, k = synthetic_qk(grid, CFG, 7)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1),
                               np.full(grid.size, math.sqrt(CFG.d_h)), rtol=1e-12)
    q2, _ = synthetic_qk(grid, CFG, 7, row_norm=1.0)
    np.testing.assert_allclose(np.linalg.norm(q2, axis=1), np.ones(grid.size), rtol=1e-12)


def test_scaling_sweep_small_grid_arithmetic():
    rows = theorem_scaling_sweep([GridShape(2, 2, 2)], CFG, c=0.5, seed=0)
    row = rows[0]
    assert row["L"] == 8
    assert row["tau"] == pytest.approx(0.5 / math.sqrt(8), rel=1e-15)
    assert row["nnz_bound"] == 8 * math.floor(1.0 / row["tau"])
    assert math.floor(1.0 / row["tau"]) == 5
    assert row["holds"]


def test_scaling_sweep_rejects_large_c():
    with pytest.raises(ValueError):
        theorem_scaling_sweep([GridShape(1, 1, 1)], CFG, c=1.0, seed=0)
    with pytest.raises(ValueError):
        theorem_scaling_sweep([GridShape(2, 2, 2)], CFG, c=3.0, seed=0)


def test_scaling_sweep_requires_sorted_grids():
    with pytest.raises(ValueError):
        theorem_scaling_sweep([GridShape(4, 4, 4), GridShape(2, 2, 2)], CFG, 0.5, 0)


def test_scaling_sweep_nnz_fraction_shrinks():
    rows = theorem_scaling_sweep([GridShape(4, 4, 4), GridShape(8, 8, 8)], CFG,
                                 c=0.5, seed=0)
    dens = [r["nnz"] / r["L"] ** 2 for r in rows]
    assert dens[1] < dens[0]
    for r in rows:
        assert r["holds"] and r["nnz"] <= r["nnz_bound"]
