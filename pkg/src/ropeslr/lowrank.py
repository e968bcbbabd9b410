"""Positive random features and the sparse-plus-low-rank attention rebuild.

The pipeline: truncate the logit matrix to its low-frequency part, factor it
by a thin SVD, push both factors through a shared positive random feature map
so the exponential kernel is estimated by an inner product of positive
features, renormalize rows with the true partition values, and patch the spike
set with an exact sparse residual.  The spike entries of the rebuilt matrix
are pinned to the originals, so the error there is identically zero and all
approximation error lives on the background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .decomposition import (
    DESK_CAP,
    AttentionMatrix,
    energy_split,
    softmax_attention,
)
from .linalg import as_matrix, numerical_rank
from .rope3d import (
    GridShape,
    RopeConfig,
    choose_truncation,
    logit_matrix,
    rotate_rows,
    selected_pair_columns,
)


@dataclass(frozen=True)
class FavorMap:
    """Gaussian feature directions, drawn once and shared between the query
    and key featurizations (sharing is what makes the estimator unbiased)."""

    omegas: np.ndarray
    seed: int

    @property
    def feature_dim(self) -> int:
        return self.omegas.shape[0]

    @property
    def input_dim(self) -> int:
        return self.omegas.shape[1]


def favor_map(input_dim: int, feature_dim: int, seed: int) -> FavorMap:
    if input_dim < 1 or feature_dim < 1:
        raise ValueError("feature map dimensions must be positive")
    rng = np.random.default_rng(seed)
    return FavorMap(omegas=rng.standard_normal((feature_dim, input_dim)), seed=int(seed))


def favor_features(x, fmap: FavorMap) -> np.ndarray:
    """phi(x)_i = exp(omega_i . x - ||x||^2 / 2) / sqrt(R); always positive,
    and E[phi(q) . phi(k)] = exp(q . k)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (fmap.input_dim,):
        raise ValueError(f"expected a vector of length {fmap.input_dim}, got {x.shape}")
    return np.exp(fmap.omegas @ x - 0.5 * float(x @ x)) / math.sqrt(fmap.feature_dim)


def favor_features_rows(m, fmap: FavorMap) -> np.ndarray:
    m = as_matrix(m)
    if m.shape[1] != fmap.input_dim:
        raise ValueError(f"expected {fmap.input_dim} columns, got {m.shape[1]}")
    sq = 0.5 * np.sum(m * m, axis=1, keepdims=True)
    return np.exp(m @ fmap.omegas.T - sq) / math.sqrt(fmap.feature_dim)


def approx_kernel(q_fac, k_fac, fmap: FavorMap) -> np.ndarray:
    """Estimated exponential kernel matrix phi(Q) phi(K)^T; rank at most the
    feature dimension because it is a product of L x R factors."""
    return favor_features_rows(q_fac, fmap) @ favor_features_rows(k_fac, fmap).T


def normalize_rows(e_hat, z) -> np.ndarray:
    """Scale row p by 1/z_p. A positive diagonal rescaling, so the singular
    value count above the numerical-rank threshold is unchanged."""
    e_hat = as_matrix(e_hat)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (e_hat.shape[0],):
        raise ValueError(f"expected {e_hat.shape[0]} partition values, got shape {z.shape}")
    if not np.all(np.isfinite(z)) or np.any(z <= 0.0):
        raise ValueError("partition values must be finite and strictly positive")
    return e_hat / z[:, None]


def residual_sparse(attn: AttentionMatrix, a_lowrank, spike_mask) -> np.ndarray:
    """Exact compensator on the spike set: a - a_lowrank there, zero elsewhere."""
    a_lowrank = as_matrix(a_lowrank)
    spike_mask = np.asarray(spike_mask, dtype=bool)
    if a_lowrank.shape != attn.a.shape or spike_mask.shape != attn.a.shape:
        raise ValueError("low-rank matrix and spike mask must match the attention shape")
    return np.where(spike_mask, attn.a - a_lowrank, 0.0)


def _truncated_svd_factors(q_mat, k_mat, grid: GridShape, cfg: RopeConfig,
                           cutoffs) -> Tuple[np.ndarray, np.ndarray]:
    """Thin SVD factors (U sqrt(S), V sqrt(S)) of the truncated logit matrix,
    computed through its explicit low-rank pair factors so no dense L x L SVD
    is needed."""
    cols = selected_pair_columns(cfg, cutoffs)
    ell = grid.size
    if cols.size == 0:
        return np.zeros((ell, 1)), np.zeros((ell, 1))
    f = rotate_rows(q_mat, grid, cfg)[:, cols]
    g = rotate_rows(k_mat, grid, cfg)[:, cols]
    qf, rf = np.linalg.qr(f)
    qg, rg = np.linalg.qr(g)
    core = (rf @ rg.T) / math.sqrt(cfg.d_h)
    uc, sv, vct = np.linalg.svd(core)
    if sv[0] == 0.0:
        return np.zeros((ell, 1)), np.zeros((ell, 1))
    keep = sv > 1e-9 * sv[0]
    root = np.sqrt(sv[keep])
    q_fac = (qf @ uc[:, keep]) * root[None, :]
    k_fac = (qg @ vct.T[:, keep]) * root[None, :]
    return q_fac, k_fac


@dataclass(frozen=True)
class Reconstruction:
    """Sparse-plus-low-rank rebuild of an attention matrix.

    a_final equals the original attention bitwise on the spike set (the
    residual branch is an exact compensator there) and equals a_lowrank on
    the background; max_err_spike is therefore exactly 0 on every run.
    """

    tau: float
    e_tol: float
    spike_mask: np.ndarray
    a_lowrank: np.ndarray
    a_sparse_resid: np.ndarray
    a_final: np.ndarray
    rank_lowrank: int
    nnz_sparse: int
    max_err_spike: float
    max_err_bg: float
    cutoffs: Tuple[int, int, int]
    favor_dim: int

    @property
    def support_matches_spikes(self) -> bool:
        return bool(np.array_equal(self.a_sparse_resid != 0.0, self.spike_mask))


def reconstruct(q_mat, k_mat, grid: GridShape, cfg: RopeConfig, tau: float,
                e_tol: float, favor_dim: int, seed: int) -> Reconstruction:
    """End-to-end rebuild against the exact attention built from (q, k).

    The truncation tolerance is delta = e_tol / (4 tau), matching the error
    budget that makes the background error at most e_tol when the random
    feature estimate concentrates.
    """
    if not (np.isfinite(e_tol) and e_tol > 0.0):
        raise ValueError(f"e_tol must be a positive real, got {e_tol}")
    if not (2.0 * e_tol <= tau < 1.0):
        raise ValueError(f"tau must lie in [2*e_tol, 1) = [{2.0 * e_tol}, 1), got {tau}")
    if favor_dim < 1:
        raise ValueError("favor_dim must be a positive count")
    if grid.size > DESK_CAP:
        raise ValueError(f"grid has {grid.size} tokens, above the desk cap {DESK_CAP}")

    s = logit_matrix(q_mat, k_mat, grid, cfg)
    attn = softmax_attention(s)
    dec = energy_split(attn, tau)

    delta = e_tol / (4.0 * tau)
    cutoffs = choose_truncation(q_mat, k_mat, cfg, delta)
    q_fac, k_fac = _truncated_svd_factors(q_mat, k_mat, grid, cfg, cutoffs)

    fmap = favor_map(q_fac.shape[1], favor_dim, seed)
    e_hat = approx_kernel(q_fac, k_fac, fmap)
    a_lowrank = normalize_rows(e_hat, attn.z)

    resid = residual_sparse(attn, a_lowrank, dec.spike_mask)
    a_final = np.where(dec.spike_mask, attn.a, a_lowrank)

    err = np.abs(a_final - attn.a)
    on_spikes = err[dec.spike_mask]
    on_bg = err[~dec.spike_mask]
    return Reconstruction(
        tau=float(tau),
        e_tol=float(e_tol),
        spike_mask=dec.spike_mask,
        a_lowrank=a_lowrank,
        a_sparse_resid=resid,
        a_final=a_final,
        rank_lowrank=numerical_rank(a_lowrank),
        nnz_sparse=dec.nnz,
        max_err_spike=float(on_spikes.max()) if on_spikes.size else 0.0,
        max_err_bg=float(on_bg.max()) if on_bg.size else 0.0,
        cutoffs=cutoffs,
        favor_dim=int(favor_dim),
    )
