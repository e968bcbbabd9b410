"""3D rotary position machinery.

The head dimension is split into contiguous [t | x | y] blocks; inside each
block coordinates are rotated pairwise at columns (2j, 2j+1) with the usual
exponentially decaying frequency schedule.  Pre-softmax logits then admit an
exact trigonometric expansion over the per-axis relative offsets, where every
(axis, frequency) term is a rank <= 2 matrix.  Truncating high frequencies
yields a low-rank logit approximation whose error is controlled by measured
per-frequency coefficient tails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from .linalg import as_matrix

AXES = ("t", "x", "y")


@dataclass(frozen=True)
class RopeConfig:
    """Per-axis head-dimension split. Zero-width axes are allowed so a 1D
    degenerate configuration (everything on the t axis) works out of the box."""

    d_t: int
    d_x: int
    d_y: int
    base: float = 10000.0

    def __post_init__(self):
        for name, d in (("d_t", self.d_t), ("d_x", self.d_x), ("d_y", self.d_y)):
            if d < 0 or d % 2 != 0:
                raise ValueError(f"{name} must be an even non-negative count, got {d}")
        if self.d_h < 2:
            raise ValueError("total head dimension must be at least 2")
        if not (np.isfinite(self.base) and self.base > 0.0):
            raise ValueError(f"frequency base must be a positive real, got {self.base}")

    @property
    def d_h(self) -> int:
        return self.d_t + self.d_x + self.d_y

    def axis_dim(self, axis: str) -> int:
        if axis not in AXES:
            raise ValueError(f"unknown axis {axis!r}, expected one of {AXES}")
        return {"t": self.d_t, "x": self.d_x, "y": self.d_y}[axis]

    def n_freqs(self, axis: str) -> int:
        return self.axis_dim(axis) // 2

    def axis_offset(self, axis: str) -> int:
        """Column offset of the axis block inside a d_h-wide vector."""
        if axis == "t":
            return 0
        if axis == "x":
            return self.d_t
        return self.d_t + self.d_x


@dataclass(frozen=True)
class GridShape:
    """Spatiotemporal grid of T frames of H x W tokens, flattened row-major:
    p = t*(H*W) + x*W + y."""

    t: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.t, self.h, self.w) < 1:
            raise ValueError(f"grid dimensions must be positive, got {(self.t, self.h, self.w)}")

    @property
    def size(self) -> int:
        return self.t * self.h * self.w

    def coords(self) -> np.ndarray:
        """(L, 3) integer array of (t, x, y) for every flat index."""
        p = np.arange(self.size)
        frame = self.h * self.w
        t = p // frame
        rem = p % frame
        return np.stack([t, rem // self.w, rem % self.w], axis=1)

    def coord(self, p: int) -> Tuple[int, int, int]:
        if not (0 <= p < self.size):
            raise ValueError(f"flat index {p} out of range for L={self.size}")
        frame = self.h * self.w
        return (p // frame, (p % frame) // self.w, p % self.w)

    def flat_index(self, t: int, x: int, y: int) -> int:
        if not (0 <= t < self.t and 0 <= x < self.h and 0 <= y < self.w):
            raise ValueError(f"coordinate {(t, x, y)} outside grid {(self.t, self.h, self.w)}")
        return t * self.h * self.w + x * self.w + y


def freq(cfg: RopeConfig, axis: str, m: int) -> float:
    """Rotation frequency of the m-th pair on an axis, strictly decreasing in m."""
    d_k = cfg.axis_dim(axis)
    if not (1 <= m <= d_k // 2):
        raise ValueError(f"frequency index m={m} out of range [1, {d_k // 2}] for axis {axis!r}")
    return float(cfg.base ** (-2.0 * (m - 1) / d_k))


def _slots(cfg: RopeConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Frequencies and coordinate-axis index for every rotation pair, in
    (axis, m) order. Pair j occupies vector columns (2j, 2j+1)."""
    thetas = []
    axis_idx = []
    for ai, axis in enumerate(AXES):
        for m in range(1, cfg.n_freqs(axis) + 1):
            thetas.append(freq(cfg, axis, m))
            axis_idx.append(ai)
    return np.asarray(thetas), np.asarray(axis_idx, dtype=np.int64)


def _pair_angles(grid: GridShape, cfg: RopeConfig) -> np.ndarray:
    thetas, axis_idx = _slots(cfg)
    return grid.coords()[:, axis_idx] * thetas[None, :]


def _apply_pair_rotation(m: np.ndarray, ang: np.ndarray) -> np.ndarray:
    c = np.cos(ang)
    s = np.sin(ang)
    even = m[..., 0::2]
    odd = m[..., 1::2]
    out = np.empty_like(m)
    out[..., 0::2] = c * even - s * odd
    out[..., 1::2] = s * even + c * odd
    return out


def rotate_rows(m, grid: GridShape, cfg: RopeConfig) -> np.ndarray:
    """Rotate row p of an (L, d_h) matrix by the composite rotation at position p."""
    m = as_matrix(m)
    if m.shape != (grid.size, cfg.d_h):
        raise ValueError(f"expected shape {(grid.size, cfg.d_h)}, got {m.shape}")
    return _apply_pair_rotation(m, _pair_angles(grid, cfg))


def rotate(v, p: int, grid: GridShape, cfg: RopeConfig) -> np.ndarray:
    """Rotate a single d_h vector by the composite rotation at flat position p.
    Orthogonal, so the Euclidean norm is preserved."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (cfg.d_h,):
        raise ValueError(f"expected a vector of length {cfg.d_h}, got shape {v.shape}")
    if not (0 <= p < grid.size):
        raise ValueError(f"flat position {p} out of range for L={grid.size}")
    thetas, axis_idx = _slots(cfg)
    coord = np.asarray(grid.coord(p))
    ang = coord[axis_idx] * thetas
    return _apply_pair_rotation(v[None, :], ang[None, :])[0]


def logit_direct(q, k, p: int, q_pos: int, grid: GridShape, cfg: RopeConfig) -> float:
    """Pre-softmax logit <R(p) q, R(q_pos) k> / sqrt(d_h)."""
    rq = rotate(q, p, grid, cfg)
    rk = rotate(k, q_pos, grid, cfg)
    return float(rq @ rk) / math.sqrt(cfg.d_h)


def logit_matrix(q_mat, k_mat, grid: GridShape, cfg: RopeConfig) -> np.ndarray:
    """Full L x L pre-softmax logit matrix, 1/sqrt(d_h) scaled."""
    rq = rotate_rows(q_mat, grid, cfg)
    rk = rotate_rows(k_mat, grid, cfg)
    return (rq @ rk.T) / math.sqrt(cfg.d_h)


@dataclass(frozen=True)
class FourierCoeffs:
    """Cosine/sine coefficients of one (q, k) pair per axis and frequency.

    For the 2-vectors u = q pair, v = k pair: a = u1 v1 + u2 v2 and
    b = u1 v2 - u2 v1, each bounded by ||u|| ||v||.
    """

    a: Dict[str, np.ndarray]
    b: Dict[str, np.ndarray]


def fourier_coeffs(q, k, cfg: RopeConfig) -> FourierCoeffs:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != (cfg.d_h,) or k.shape != (cfg.d_h,):
        raise ValueError(f"expected two vectors of length {cfg.d_h}, got {q.shape} and {k.shape}")
    a: Dict[str, np.ndarray] = {}
    b: Dict[str, np.ndarray] = {}
    for axis in AXES:
        off = cfg.axis_offset(axis)
        d_k = cfg.axis_dim(axis)
        u = q[off:off + d_k]
        v = k[off:off + d_k]
        u1, u2 = u[0::2], u[1::2]
        v1, v2 = v[0::2], v[1::2]
        a[axis] = u1 * v1 + u2 * v2
        b[axis] = u1 * v2 - u2 * v1
    return FourierCoeffs(a=a, b=b)


def logit_fourier(coeffs: FourierCoeffs, delta: Sequence[float], cfg: RopeConfig) -> float:
    """Evaluate the trigonometric expansion of the logit at relative offset
    delta = (dt, dx, dy); equals logit_direct for the same token pair."""
    if len(delta) != 3:
        raise ValueError("delta must be a (dt, dx, dy) triple")
    total = 0.0
    for axis, d in zip(AXES, delta):
        n = cfg.n_freqs(axis)
        if coeffs.a[axis].shape != (n,) or coeffs.b[axis].shape != (n,):
            raise ValueError(f"coefficients for axis {axis!r} must have length {n}")
        if n == 0:
            continue
        thetas = np.array([freq(cfg, axis, m) for m in range(1, n + 1)])
        ang = thetas * d
        total += float(np.sum(coeffs.a[axis] * np.cos(ang) + coeffs.b[axis] * np.sin(ang)))
    return total / math.sqrt(cfg.d_h)


def _pair_columns(cfg: RopeConfig, axis: str, m: int) -> Tuple[int, int]:
    off = cfg.axis_offset(axis)
    return off + 2 * (m - 1), off + 2 * m - 1


def frequency_term_matrix(q_mat, k_mat, axis: str, m: int, grid: GridShape,
                          cfg: RopeConfig) -> np.ndarray:
    """L x L interaction matrix of one (axis, frequency) rotation pair,
    unscaled. It factors through rotated 2-vectors, hence rank <= 2."""
    q_mat = as_matrix(q_mat)
    k_mat = as_matrix(k_mat)
    if q_mat.shape != (grid.size, cfg.d_h) or k_mat.shape != (grid.size, cfg.d_h):
        raise ValueError("q/k matrices must be (L, d_h) and conform to the grid")
    theta = freq(cfg, axis, m)  # validates axis and m
    c0, c1 = _pair_columns(cfg, axis, m)
    ai = AXES.index(axis)
    ang = grid.coords()[:, ai] * theta
    c, s = np.cos(ang), np.sin(ang)

    def rotated_pair(mat):
        e, o = mat[:, c0], mat[:, c1]
        return np.stack([c * e - s * o, s * e + c * o], axis=1)

    return rotated_pair(q_mat) @ rotated_pair(k_mat).T


def frequency_magnitudes(q_mat, k_mat, cfg: RopeConfig) -> Dict[str, np.ndarray]:
    """Measured per-(axis, frequency) coefficient bound max_{p,q} (|a| + |b|),
    on the unscaled logit scale. Position independent."""
    q_mat = as_matrix(q_mat)
    k_mat = as_matrix(k_mat)
    if q_mat.shape[1] != cfg.d_h or k_mat.shape[1] != cfg.d_h:
        raise ValueError(f"q/k matrices must have {cfg.d_h} columns")
    out: Dict[str, np.ndarray] = {}
    for axis in AXES:
        mags = np.zeros(cfg.n_freqs(axis))
        for m in range(1, cfg.n_freqs(axis) + 1):
            c0, c1 = _pair_columns(cfg, axis, m)
            qe, qo = q_mat[:, c0], q_mat[:, c1]
            ke, ko = k_mat[:, c0], k_mat[:, c1]
            a = qe[:, None] * ke[None, :] + qo[:, None] * ko[None, :]
            b = qe[:, None] * ko[None, :] - qo[:, None] * ke[None, :]
            mags[m - 1] = float(np.max(np.abs(a) + np.abs(b)))
        out[axis] = mags
    return out


def _validate_cutoffs(cfg: RopeConfig, cutoffs: Sequence[int]) -> Tuple[int, int, int]:
    if len(cutoffs) != 3:
        raise ValueError("cutoffs must be an (M_t, M_x, M_y) triple")
    for axis, m_k in zip(AXES, cutoffs):
        if not (0 <= m_k <= cfg.n_freqs(axis)):
            raise ValueError(
                f"cutoff {m_k} out of range [0, {cfg.n_freqs(axis)}] for axis {axis!r}")
    return tuple(int(m) for m in cutoffs)  # type: ignore[return-value]


def selected_pair_columns(cfg: RopeConfig, cutoffs: Sequence[int]) -> np.ndarray:
    """Vector column indices covered by frequencies m <= M_k on each axis."""
    m_t, m_x, m_y = _validate_cutoffs(cfg, cutoffs)
    cols = []
    for axis, m_k in zip(AXES, (m_t, m_x, m_y)):
        for m in range(1, m_k + 1):
            cols.extend(_pair_columns(cfg, axis, m))
    return np.asarray(cols, dtype=np.int64)


def truncated_logits(q_mat, k_mat, grid: GridShape, cfg: RopeConfig,
                     cutoffs: Sequence[int]) -> np.ndarray:
    """Low-frequency part of the logit matrix (1/sqrt(d_h) scaled); its rank
    is at most 2 * (M_t + M_x + M_y)."""
    cols = selected_pair_columns(cfg, cutoffs)
    if cols.size == 0:
        return np.zeros((grid.size, grid.size))
    rq = rotate_rows(q_mat, grid, cfg)[:, cols]
    rk = rotate_rows(k_mat, grid, cfg)[:, cols]
    return (rq @ rk.T) / math.sqrt(cfg.d_h)


def truncation_tail_bound(q_mat, k_mat, cfg: RopeConfig, cutoffs: Sequence[int]) -> float:
    """Measured uniform bound on |logit_matrix - truncated_logits| for the
    given cutoffs, on the scaled logit scale."""
    m_t, m_x, m_y = _validate_cutoffs(cfg, cutoffs)
    mags = frequency_magnitudes(q_mat, k_mat, cfg)
    total = 0.0
    for axis, m_k in zip(AXES, (m_t, m_x, m_y)):
        total += float(np.sum(mags[axis][m_k:]))
    return total / math.sqrt(cfg.d_h)


def choose_truncation(q_mat, k_mat, cfg: RopeConfig, delta: float) -> Tuple[int, int, int]:
    """Smallest per-axis cutoffs whose measured tail bounds are each at most
    delta/3, so the truncated logit error is at most delta by construction."""
    if not (np.isfinite(delta) and delta > 0.0):
        raise ValueError(f"delta must be a positive real, got {delta}")
    mags = frequency_magnitudes(q_mat, k_mat, cfg)
    scale = math.sqrt(cfg.d_h)
    budget = delta * scale / 3.0
    cutoffs = []
    for axis in AXES:
        mag = mags[axis]
        # suffix[M] = sum of magnitudes for m > M, so suffix[n_freqs] = 0 and the
        # search below always terminates.
        suffix = np.concatenate([np.cumsum(mag[::-1])[::-1], [0.0]])
        cutoffs.append(int(np.argmax(suffix <= budget)))
    return tuple(cutoffs)  # type: ignore[return-value]
