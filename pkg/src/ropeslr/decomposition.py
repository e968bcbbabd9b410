"""Softmax attention and its energy-threshold split into spikes and background.

Entries strictly above the threshold tau form the spike set; everything else
(ties included) is background.  Row-stochasticity then pins the per-row spike
count at floor(1/tau) and the background sup-norm at tau, deterministically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .linalg import as_matrix
from .rope3d import GridShape, RopeConfig, logit_matrix

# Largest token count for which dense L x L matrices are considered tractable.
DESK_CAP = 4096


@dataclass(frozen=True)
class AttentionMatrix:
    """Row-stochastic attention with its true row partition values.

    z = exp(log_z) can overflow to +inf for logit rows beyond ~700; a stays
    exact either way because it is computed with max-subtraction.
    """

    a: np.ndarray
    log_z: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return np.exp(self.log_z)

    @property
    def size(self) -> int:
        return self.a.shape[0]


def softmax_attention(s) -> AttentionMatrix:
    """Row softmax with per-row max subtraction for overflow safety."""
    s = as_matrix(s)
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square logit matrix, got {s.shape}")
    row_max = s.max(axis=1, keepdims=True)
    e = np.exp(s - row_max)
    denom = e.sum(axis=1, keepdims=True)
    a = e / denom
    log_z = row_max[:, 0] + np.log(denom[:, 0])
    return AttentionMatrix(a=a, log_z=log_z)


@dataclass(frozen=True)
class Decomposition:
    """Disjoint split a = a_sparse + a_bg at threshold tau.

    Ties at exactly tau go to the background (spikes use a strict '>')."""

    tau: float
    spike_mask: np.ndarray
    a_sparse: np.ndarray
    a_bg: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.spike_mask.sum())


def energy_split(attn: AttentionMatrix, tau: float) -> Decomposition:
    if not (0.0 < tau < 1.0):
        raise ValueError(f"threshold tau must lie in (0, 1), got {tau}")
    mask = attn.a > tau
    a_sparse = np.where(mask, attn.a, 0.0)
    a_bg = np.where(mask, 0.0, attn.a)
    return Decomposition(tau=float(tau), spike_mask=mask, a_sparse=a_sparse, a_bg=a_bg)


@dataclass(frozen=True)
class SparsityReport:
    max_row_nnz: int
    bound: int
    holds: bool


def verify_sparsity_bound(dec: Decomposition) -> SparsityReport:
    """Check the deterministic per-row spike bound floor(1/tau); a violation
    would be a library bug, not a property of the input."""
    max_row = int(dec.spike_mask.sum(axis=1).max())
    bound = math.floor(1.0 / dec.tau)
    return SparsityReport(max_row_nnz=max_row, bound=bound, holds=max_row <= bound)


def background_inf_norm(dec: Decomposition) -> float:
    return float(np.abs(dec.a_bg).max())


# Absolute slack used when comparing accumulated probability mass against a
# target fraction, so fp dust cannot force an extra retained entry.
_MASS_SLACK = 1e-12


def count_for_mass(sorted_desc: np.ndarray, target: float) -> int:
    """Smallest count of leading entries whose cumulative sum reaches target."""
    csum = np.cumsum(sorted_desc)
    reached = csum >= target - _MASS_SLACK
    if not np.any(reached):
        return int(sorted_desc.size)
    return int(np.argmax(reached)) + 1


@dataclass(frozen=True)
class RowEnergySplit:
    """Per-row cumulative-energy split: the fewest largest entries whose mass
    reaches the energy fraction are retained, the rest is the residual."""

    energy: float
    keep_mask: np.ndarray
    retained: np.ndarray
    residual: np.ndarray

    @property
    def retained_count(self) -> int:
        return int(self.keep_mask.sum())


def row_energy_split(attn: AttentionMatrix, energy: float) -> RowEnergySplit:
    if not (0.0 < energy < 1.0):
        raise ValueError(f"energy fraction must lie in (0, 1), got {energy}")
    a = attn.a
    keep = np.zeros_like(a, dtype=bool)
    for p in range(a.shape[0]):
        row = a[p]
        # stable sort on the negated row: ties resolve to the lower column index
        order = np.argsort(-row, kind="stable")
        n_keep = count_for_mass(row[order], energy)
        keep[p, order[:n_keep]] = True
    retained = np.where(keep, a, 0.0)
    residual = np.where(keep, 0.0, a)
    return RowEnergySplit(energy=float(energy), keep_mask=keep,
                          retained=retained, residual=residual)


def synthetic_qk(grid: GridShape, cfg: RopeConfig, seed: int,
                 row_norm: float | None = None):
    """Seeded Gaussian query/key matrices with rows scaled to a common norm,
    by default sqrt(d_h), the norm a LayerNorm front end would produce."""
    rng = np.random.default_rng(seed)
    target = math.sqrt(cfg.d_h) if row_norm is None else float(row_norm)
    if not (target > 0.0):
        raise ValueError("row norm must be positive")

    def draw():
        m = rng.standard_normal((grid.size, cfg.d_h))
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        return m * (target / norms)

    return draw(), draw()


def synthetic_qk_concentrated(grid: GridShape, cfg: RopeConfig, seed: int,
                              decay_alpha: float = 1.0, mix: float = 1.0):
    """Gaussian query/key matrices whose per-frequency subspaces are damped
    as base^(-decay_alpha*(m-1)/d_k), imitating the spectral concentration a
    trained model shows. `mix` blends between flat noise (0, early denoising)
    and fully concentrated (1, late denoising)."""
    if not (0.0 <= mix <= 1.0):
        raise ValueError(f"mix must lie in [0, 1], got {mix}")
    if decay_alpha < 0.0:
        raise ValueError("decay_alpha must be non-negative")
    from .rope3d import AXES  # local import keeps module load order simple

    weights = np.ones(cfg.d_h)
    for axis in AXES:
        d_k = cfg.axis_dim(axis)
        off = cfg.axis_offset(axis)
        for m in range(1, d_k // 2 + 1):
            damp = cfg.base ** (-decay_alpha * (m - 1) / d_k)
            w = mix * damp + (1.0 - mix)
            weights[off + 2 * (m - 1)] = w
            weights[off + 2 * m - 1] = w
    rng = np.random.default_rng(seed)
    target = math.sqrt(cfg.d_h)

    def draw():
        m = rng.standard_normal((grid.size, cfg.d_h)) * weights
        return m * (target / np.linalg.norm(m, axis=1, keepdims=True))

    return draw(), draw()


def synthetic_attention(grid: GridShape, cfg: RopeConfig, seed: int) -> AttentionMatrix:
    if grid.size > DESK_CAP:
        raise ValueError(f"grid has {grid.size} tokens, above the desk cap {DESK_CAP}")
    q, k = synthetic_qk(grid, cfg, seed)
    return softmax_attention(logit_matrix(q, k, grid, cfg))


def scaling_sweep_point(grid: GridShape, cfg: RopeConfig, c: float, seed: int) -> dict:
    """One sweep row at threshold tau = c / sqrt(L) on synthetic attention."""
    if grid.size > DESK_CAP:
        raise ValueError(f"grid has {grid.size} tokens, above the desk cap {DESK_CAP}")
    ell = grid.size
    tau = c / math.sqrt(ell)
    if not (0.0 < tau < 1.0):
        raise ValueError(f"tau = c/sqrt(L) = {tau} outside (0, 1); need 0 < c < sqrt(L)")
    attn = synthetic_attention(grid, cfg, seed)
    dec = energy_split(attn, tau)
    report = verify_sparsity_bound(dec)
    nnz = dec.nnz
    return {
        "L": ell,
        "tau": tau,
        "nnz": nnz,
        "nnz_bound": ell * report.bound,
        "nnz_over_l15": nnz / ell ** 1.5,
        "bg_inf_norm": background_inf_norm(dec),
        "sparsity": 1.0 - nnz / ell ** 2,
        "holds": report.holds,
    }


def theorem_scaling_sweep(grids: Sequence[GridShape], cfg: RopeConfig, c: float,
                          seed: int) -> List[dict]:
    """Sweep tau = c/sqrt(L) over grids sorted by L; row i is seeded seed + i
    so points are independent of execution order."""
    if not grids:
        raise ValueError("sweep needs at least one grid")
    sizes = [g.size for g in grids]
    if sizes != sorted(sizes):
        raise ValueError("grids must be sorted ascending in token count")
    if not (np.isfinite(c) and c > 0.0):
        raise ValueError(f"c must be a positive real, got {c}")
    if c >= math.sqrt(sizes[0]):
        raise ValueError(f"c={c} makes tau >= 1 at L={sizes[0]}; need c < sqrt(L_min)")
    return [scaling_sweep_point(g, cfg, c, seed + i) for i, g in enumerate(grids)]
