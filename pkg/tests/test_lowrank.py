import math

import numpy as np
import pytest

from ropeslr.decomposition import energy_split, softmax_attention, synthetic_qk
from ropeslr.linalg import numerical_rank, singular_values
from ropeslr.lowrank import (
    approx_kernel,
    favor_features,
    favor_features_rows,
    favor_map,
    normalize_rows,
    reconstruct,
    residual_sparse,
)
from ropeslr.rope3d import GridShape, RopeConfig, logit_matrix

CFG = RopeConfig(4, 4, 4)


def test_favor_features_zero_vector_exact():
    fmap = favor_map(3, 64, seed=0)  # 64 = 4^3 keeps 1/sqrt(R) exact
    phi = favor_features(np.zeros(3), fmap)
    np.testing.assert_array_equal(phi, np.full(64, 0.125))
    assert float(phi @ phi) == 1.0  # exp(0) estimated with zero variance


def test_favor_features_positive():
    rng = np.random.default_rng(1)
    fmap = favor_map(6, 128, seed=1)
    for _ in range(1000):
        phi = favor_features(rng.standard_normal(6), fmap)
        assert np.all(phi > 0)


def test_favor_features_dimension_mismatch():
    fmap = favor_map(4, 16, seed=2)
    with pytest.raises(ValueError):
        favor_features(np.zeros(5), fmap)


def test_favor_shared_map_concentrates():
    rng = np.random.default_rng(3)
    q = rng.standard_normal(8)
    q *= 0.8 / np.linalg.norm(q)
    k = rng.standard_normal(8)
    k *= 0.9 / np.linalg.norm(k)
    truth = math.exp(float(q @ k))
    hits = 0
    for seed in range(20):
        fmap = favor_map(8, 4096, seed)
        est = float(favor_features(q, fmap) @ favor_features(k, fmap))
        if abs(est - truth) / truth <= 0.1:
            hits += 1
    assert hits >= 19


def test_favor_unbiased_within_three_standard_errors():
    rng = np.random.default_rng(4)
    q = rng.standard_normal(8)
    q *= 0.8 / np.linalg.norm(q)
    k = rng.standard_normal(8)
    k *= 0.9 / np.linalg.norm(k)
    truth = math.exp(float(q @ k))
    ests = np.array([
        float(favor_features(q, favor_map(8, 64, seed + 50_000))
              @ favor_features(k, favor_map(8, 64, seed + 50_000)))
        for seed in range(1000)
    ])
    se = ests.std(ddof=1) / math.sqrt(ests.size)
    assert abs(ests.mean() - truth) <= 3.0 * se


def test_approx_kernel_single_row_reduces_to_feature_product():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 4)) * 0.3
    y = rng.standard_normal((1, 4)) * 0.3
    fmap = favor_map(4, 256, seed=6)
    k_hat = approx_kernel(x, y, fmap)
    expect = float(favor_features(x[0], fmap) @ favor_features(y[0], fmap))
    assert k_hat.shape == (1, 1)
    assert k_hat[0, 0] == pytest.approx(expect, rel=1e-12)


def test_approx_kernel_zero_factors_gives_ones():
    fmap = favor_map(1, 64, seed=7)
    k_hat = approx_kernel(np.zeros((5, 1)), np.zeros((5, 1)), fmap)
    np.testing.assert_array_equal(k_hat, np.ones((5, 5)))


def test_approx_kernel_rank_bounded_by_feature_dim():
    rng = np.random.default_rng(8)
    q_fac = rng.standard_normal((64, 3)) * 0.2
    k_fac = rng.standard_normal((64, 3)) * 0.2
    fmap = favor_map(3, 8, seed=9)
    s = singular_values(approx_kernel(q_fac, k_fac, fmap))
    assert s[8] <= 1e-9 * s[0]


def test_normalize_rows_identity_when_z_is_one():
    rng = np.random.default_rng(10)
    e_hat = np.abs(rng.standard_normal((4, 4)))
    np.testing.assert_array_equal(normalize_rows(e_hat, np.ones(4)), e_hat)


def test_normalize_rows_preserves_rank_one():
    e_hat = np.outer([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])
    out = normalize_rows(e_hat, np.array([2.0, 4.0, 8.0]))
    assert numerical_rank(out) == 1


def test_normalize_rows_preserves_numerical_rank():
    rng = np.random.default_rng(11)
    for trial in range(5):
        rank = trial % 4 + 2
        e_hat = rng.standard_normal((32, rank)) @ rng.standard_normal((rank, 32))
        z = np.abs(rng.standard_normal(32)) + 0.1
        assert numerical_rank(normalize_rows(e_hat, z)) == numerical_rank(e_hat)


def test_normalize_rows_rejects_nonpositive_z():
    with pytest.raises(ValueError):
        normalize_rows(np.ones((2, 2)), np.array([1.0, 0.0]))


def test_residual_sparse_empty_spikes():
    attn = softmax_attention(np.zeros((3, 3)))
    out = residual_sparse(attn, np.zeros((3, 3)), np.zeros((3, 3), dtype=bool))
    np.testing.assert_array_equal(out, np.zeros((3, 3)))


def test_residual_sparse_exact_match_gives_zero():
    attn = softmax_attention(np.zeros((3, 3)))
    mask = np.eye(3, dtype=bool)
    out = residual_sparse(attn, attn.a.copy(), mask)
    np.testing.assert_array_equal(out, np.zeros((3, 3)))


def test_residual_sparse_identity_on_spikes():
    rng = np.random.default_rng(12)
    attn = softmax_attention(rng.standard_normal((8, 8)))
    # approximation near the truth: the compensated sum recovers the original
    # entries bitwise on the spike support
    a_lr = attn.a * (1.0 + 0.1 * rng.standard_normal((8, 8)))
    mask = attn.a > 0.1
    resid = residual_sparse(attn, a_lr, mask)
    recon = resid + a_lr
    np.testing.assert_array_equal(recon[mask], attn.a[mask])
    np.testing.assert_array_equal(resid[~mask], np.zeros(int((~mask).sum())))


def test_reconstruct_background_error_within_loose_tolerance():
    grid = GridShape(6, 6, 6)
    q, k = synthetic_qk(grid, CFG, 0, row_norm=2.0)
    rec = reconstruct(q, k, grid, CFG, tau=0.05, e_tol=0.02, favor_dim=1024, seed=0)
    attn = softmax_attention(logit_matrix(q, k, grid, CFG))
    assert float(attn.a.max()) < 0.05  # tau sits above every background entry
    assert rec.max_err_spike == 0.0
    assert rec.max_err_bg <= 0.02


def test_reconstruct_loose_e_tol_truncates_everything_but_spikes_exact():
    # tiny coefficients let the loosest allowed budget drop every frequency,
    # and near-uniform attention above tau keeps the spike set non-empty
    grid = GridShape(2, 1, 1)
    q, k = synthetic_qk(grid, CFG, 1, row_norm=0.1)
    rec = reconstruct(q, k, grid, CFG, tau=0.4, e_tol=0.2, favor_dim=64, seed=1)
    assert rec.cutoffs == (0, 0, 0)
    assert rec.max_err_spike == 0.0
    assert rec.nnz_sparse > 0


def test_reconstruct_spike_support_and_rank_bound():
    grid = GridShape(4, 4, 4)
    q, k = synthetic_qk(grid, CFG, 2)
    rec = reconstruct(q, k, grid, CFG, tau=0.05, e_tol=0.02, favor_dim=32, seed=2)
    attn = softmax_attention(logit_matrix(q, k, grid, CFG))
    dec = energy_split(attn, 0.05)
    assert dec.nnz > 0
    np.testing.assert_array_equal(rec.spike_mask, dec.spike_mask)
    assert rec.support_matches_spikes
    assert rec.max_err_spike == 0.0
    assert rec.rank_lowrank <= 32
    np.testing.assert_array_equal(rec.a_final[rec.spike_mask], attn.a[rec.spike_mask])
    np.testing.assert_array_equal(rec.a_final[~rec.spike_mask],
                                  rec.a_lowrank[~rec.spike_mask])


def test_reconstruct_precondition_errors():
    grid = GridShape(2, 2, 2)
    q, k = synthetic_qk(grid, CFG, 3)
    with pytest.raises(ValueError):
        reconstruct(q, k, grid, CFG, tau=0.05, e_tol=0.04, favor_dim=16, seed=0)
    with pytest.raises(ValueError):
        reconstruct(q, k, grid, CFG, tau=0.2, e_tol=-0.1, favor_dim=16, seed=0)


def test_reconstruct_rank_monotone_error_trend():
    grid = GridShape(4, 4, 4)
    q, k = synthetic_qk(grid, CFG, 4, row_norm=2.0)
    medians = []
    for r_dim in (8, 64, 512):
        errs = [reconstruct(q, k, grid, CFG, 0.05, 0.02, r_dim, seed).max_err_bg
                for seed in range(5)]
        medians.append(float(np.median(errs)))
    assert medians[2] <= medians[0]


def test_reconstruct_main_schedule_high_probability():
    # tau = c/sqrt(L), e_tol = tau/2 across three grid sizes; the background
    # bound must hold in at least 90% of seeded trials
    c = 0.5
    results = []
    for grid in (GridShape(4, 4, 4), GridShape(8, 8, 8), GridShape(12, 12, 12)):
        tau = c / math.sqrt(grid.size)
        e_tol = tau / 2.0
        hits = 0
        for seed in range(20):
            q, k = synthetic_qk(grid, CFG, seed, row_norm=1.5)
            rec = reconstruct(q, k, grid, CFG, tau, e_tol, favor_dim=1024,
                              seed=1000 + seed)
            assert rec.max_err_spike == 0.0
            if rec.max_err_bg <= e_tol:
                hits += 1
        results.append((grid.size, tau, e_tol, hits))
        assert hits >= 18, results
    assert [r[0] for r in results] == [64, 512, 1728]


def test_favor_features_rows_matches_vector_path():
    rng = np.random.default_rng(13)
    m = rng.standard_normal((5, 4)) * 0.4
    fmap = favor_map(4, 32, seed=14)
    rows = favor_features_rows(m, fmap)
    for i in range(5):
        np.testing.assert_allclose(rows[i], favor_features(m[i], fmap), rtol=1e-12)
