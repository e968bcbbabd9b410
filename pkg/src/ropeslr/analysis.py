"""Measurement toolkit: per-frequency interaction decay, residual stable-rank
scaling, Gram spectra of compensator outputs, and gate maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .decomposition import (
    DESK_CAP,
    AttentionMatrix,
    row_energy_split,
    synthetic_attention,
)
from .linalg import as_matrix, percentile, stable_rank, svd
from .rope3d import AXES, GridShape, RopeConfig, frequency_term_matrix

# Exhaustive pair enumeration is used up to this token count, sampling above.
EXHAUSTIVE_LIMIT = 64


def _term_values_sampled(q_mat, k_mat, grid, cfg, axis, m, sample_pairs, seed):
    term = frequency_term_matrix(q_mat, k_mat, axis, m, grid, cfg)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, grid.size, size=(sample_pairs, 2))
    return np.abs(term[idx[:, 0], idx[:, 1]])


def interaction_magnitude(q_mat, k_mat, grid: GridShape, cfg: RopeConfig, axis: str,
                          m: int, sample_pairs: int = 10000, seed: int = 0) -> float:
    """99th-percentile magnitude of one (axis, frequency) interaction over
    uniformly sampled token pairs; nearest-rank, deterministic per seed."""
    if sample_pairs < 100:
        raise ValueError(f"need at least 100 sampled pairs, got {sample_pairs}")
    vals = _term_values_sampled(q_mat, k_mat, grid, cfg, axis, m, sample_pairs, seed)
    return percentile(vals, 0.99)


def interaction_magnitude_exhaustive(q_mat, k_mat, grid: GridShape, cfg: RopeConfig,
                                     axis: str, m: int) -> float:
    term = frequency_term_matrix(q_mat, k_mat, axis, m, grid, cfg)
    return percentile(np.abs(term).ravel(), 0.99)


@dataclass(frozen=True)
class SpectralReport:
    """Per-axis interaction magnitudes M[m-1] and suffix tails
    Tail[m0-1] = sum_{m >= m0} M[m-1]."""

    magnitude: Dict[str, np.ndarray]
    tail: Dict[str, np.ndarray]


def spectral_decay_report(q_mat, k_mat, grid: GridShape, cfg: RopeConfig,
                          sample_pairs: int = 10000, seed: int = 0) -> SpectralReport:
    """Magnitude and cumulative-tail tables for every axis, plot ready.
    Enumerates all pairs when the grid is small enough, samples otherwise;
    sample streams are derived per (axis, m) slot so results do not depend on
    evaluation order."""
    magnitude: Dict[str, np.ndarray] = {}
    tail: Dict[str, np.ndarray] = {}
    slot = 0
    for axis in AXES:
        n = cfg.n_freqs(axis)
        mags = np.zeros(n)
        for m in range(1, n + 1):
            if grid.size <= EXHAUSTIVE_LIMIT:
                mags[m - 1] = interaction_magnitude_exhaustive(q_mat, k_mat, grid,
                                                               cfg, axis, m)
            else:
                mags[m - 1] = interaction_magnitude(q_mat, k_mat, grid, cfg, axis, m,
                                                    sample_pairs, seed + slot)
            slot += 1
        # right-to-left recurrence keeps each tail an exact partial sum
        tails = np.zeros(n)
        acc = 0.0
        for i in range(n - 1, -1, -1):
            acc += mags[i]
            tails[i] = acc
        magnitude[axis] = mags
        tail[axis] = tails
    return SpectralReport(magnitude=magnitude, tail=tail)


def residual_stable_rank(attn: AttentionMatrix, energy: float) -> float:
    """Stable rank of the low-energy residual after the per-row energy split;
    an all-zero residual reports 0 by convention."""
    split = row_energy_split(attn, energy)
    if not np.any(split.residual):
        return 0.0
    return stable_rank(split.residual)


def residual_stable_rank_sweep(grids: Sequence[GridShape], cfg: RopeConfig,
                               energy: float = 0.9, seed: int = 0) -> List[dict]:
    """Residual stable rank of synthetic rotary attention across grid sizes;
    row i is seeded seed + i."""
    if not grids:
        raise ValueError("sweep needs at least one grid")
    sizes = [g.size for g in grids]
    if sizes != sorted(sizes):
        raise ValueError("grids must be sorted ascending in token count")
    if max(sizes) > DESK_CAP:
        raise ValueError(f"largest grid exceeds the desk cap {DESK_CAP}")
    rows = []
    for i, grid in enumerate(grids):
        attn = synthetic_attention(grid, cfg, seed + i)
        split = row_energy_split(attn, energy)
        rsr = 0.0 if not np.any(split.residual) else stable_rank(split.residual)
        rows.append({
            "L": grid.size,
            "retained_fraction": split.retained_count / grid.size ** 2,
            "residual_stable_rank": rsr,
        })
    return rows


@dataclass(frozen=True)
class GramSpectrum:
    sigma: np.ndarray
    ratio: np.ndarray  # sigma_i / sigma_1
    energy_fraction: np.ndarray  # sigma_i^2 / sum sigma^2
    modes: np.ndarray  # (k, T, H, W) leading left singular vectors on the grid


def gram_spectral(o_lr, grid: GridShape, n_modes: int = 4) -> GramSpectrum:
    """SVD of a sequence-level compensator output with the leading spatial
    modes reshaped back onto the grid."""
    o = as_matrix(o_lr)
    if o.shape[0] != grid.size:
        raise ValueError(f"expected {grid.size} rows, got {o.shape[0]}")
    if not np.any(o):
        raise ValueError("the zero matrix has no spectrum to analyze")
    res = svd(o)
    sigma = res.sigma
    k = min(n_modes, sigma.size)
    modes = res.u[:, :k].T.reshape(k, grid.t, grid.h, grid.w)
    return GramSpectrum(sigma=sigma, ratio=sigma / sigma[0],
                        energy_fraction=sigma ** 2 / np.sum(sigma ** 2), modes=modes)


@dataclass(frozen=True)
class GateMap:
    values: np.ndarray  # (T, H, W)
    frame_means: np.ndarray  # (T,)
    mean: float
    minimum: float
    maximum: float


def gate_map(g, grid: GridShape) -> GateMap:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (grid.size,):
        raise ValueError(f"expected a gate vector of length {grid.size}, got {g.shape}")
    values = g.reshape(grid.t, grid.h, grid.w)
    return GateMap(values=values, frame_means=values.mean(axis=(1, 2)),
                   mean=float(g.mean()), minimum=float(g.min()), maximum=float(g.max()))
