"""Dense real-matrix kernel for the lab.

Builds and manipulates the four matrix families everything else consumes:
orthogonal matrices, row permutations, position-rotation matrices, and the
block-structured rotation-scaling matrices that commute with them.  Plus
plain least squares.

All functions are pure; randomness always comes in through an explicit
``numpy.random.Generator``.  Key material is float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DimensionError

__all__ = [
    "Permutation",
    "RotationScalingKey",
    "LeastSquaresSolution",
    "sample_orthogonal",
    "rope_angles",
    "rope_matrix",
    "apply_rotation",
    "make_commuting_key",
    "materialize",
    "invert_key",
    "sample_permutation",
    "apply_rows",
    "inverse",
    "solve_least_squares",
]


def sample_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an n-by-n orthogonal matrix, Haar-distributed.

    QR of an i.i.d. standard-normal matrix with the sign of R's diagonal
    fixed to +1; this makes the distribution Haar and the output a
    deterministic function of the generator state.
    """
    if n < 1:
        raise DimensionError(f"orthogonal matrix needs n >= 1, got {n}")
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def rope_angles(d: int, base: float = 10000.0) -> np.ndarray:
    """Per-block rotation frequencies theta_j = base^(-2j/d), j = 0..d/2-1."""
    if d < 2 or d % 2 != 0:
        raise DimensionError(f"rotation dimension must be even and >= 2, got {d}")
    j = np.arange(d // 2, dtype=np.float64)
    return base ** (-2.0 * j / d)


def rope_matrix(d: int, pos: int, base: float = 10000.0) -> np.ndarray:
    """Position-rotation matrix in split-half layout.

    Dimension j pairs with j + d/2.  The d x d matrix is
    ``[[C, -S], [S, C]]`` with C = diag(cos pos*theta_j) and
    S = diag(sin pos*theta_j).  Row vectors are rotated by right
    multiplication, matching how projections are applied everywhere else.
    """
    if pos < 0:
        raise DimensionError(f"position must be >= 0, got {pos}")
    ang = pos * rope_angles(d, base)
    c, s = np.cos(ang), np.sin(ang)
    h = d // 2
    m = np.zeros((d, d), dtype=np.float64)
    idx = np.arange(h)
    m[idx, idx] = c
    m[idx, idx + h] = -s
    m[idx + h, idx] = s
    m[idx + h, idx + h] = c
    return m


def apply_rotation(x: np.ndarray, pos, base: float = 10000.0) -> np.ndarray:
    """Rotate row vectors without materializing the matrix.

    ``x`` has shape (..., d); ``pos`` is a scalar position or an array
    broadcastable against the leading axes.  Equivalent to ``x @
    rope_matrix(d, pos, base)`` (verified against it in the tests) but
    O(d) per vector.
    """
    d = x.shape[-1]
    ang = np.multiply.outer(np.asarray(pos, dtype=np.float64), rope_angles(d, base))
    c, s = np.cos(ang), np.sin(ang)
    h = d // 2
    x1, x2 = x[..., :h], x[..., h:]
    return np.concatenate([x1 * c + x2 * s, x2 * c - x1 * s], axis=-1)


@dataclass(frozen=True)
class RotationScalingKey:
    """Coefficients of a block-diagonal rotation-scaling matrix.

    The materialized d x d matrix has diag(t) on both diagonal halves and
    -diag(u) / +diag(u) on the off-diagonal halves, so each (j, j+d/2)
    plane is scaled by sqrt(t_j^2 + u_j^2) and rotated.  Matrices of this
    family commute with every position-rotation matrix of the same d.
    """

    t: np.ndarray
    u: np.ndarray
    scale_bounds: tuple = (0.5, 2.0)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        u = np.asarray(self.u, dtype=np.float64)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "u", u)
        if t.ndim != 1 or t.shape != u.shape:
            raise DimensionError("t and u must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(u))):
            raise ConfigError("rotation-scaling coefficients must be finite")
        if np.any(t * t + u * u <= 0):
            raise ConfigError("every block needs t^2 + u^2 > 0 to stay invertible")

    @property
    def dim(self) -> int:
        return 2 * self.t.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.sqrt(self.t * self.t + self.u * self.u)


def make_commuting_key(
    d: int, rng: np.random.Generator, scale_bounds: tuple = (0.5, 2.0)
) -> RotationScalingKey:
    """Sample a rotation-scaling key with per-block scale inside the bounds."""
    if d < 2 or d % 2 != 0:
        raise DimensionError(f"dimension must be even and >= 2, got {d}")
    lo, hi = float(scale_bounds[0]), float(scale_bounds[1])
    if not (0 < lo <= hi):
        raise ConfigError(f"scale bounds must satisfy 0 < lo <= hi, got ({lo}, {hi})")
    scales = rng.uniform(lo, hi, d // 2)
    phases = rng.uniform(0.0, 2.0 * np.pi, d // 2)
    return RotationScalingKey(scales * np.cos(phases), scales * np.sin(phases), (lo, hi))


def materialize(key: RotationScalingKey) -> np.ndarray:
    """Expand a rotation-scaling key to its dense d x d matrix."""
    h = key.t.shape[0]
    m = np.zeros((2 * h, 2 * h), dtype=np.float64)
    idx = np.arange(h)
    m[idx, idx] = key.t
    m[idx, idx + h] = -key.u
    m[idx + h, idx] = key.u
    m[idx + h, idx + h] = key.t
    return m


def invert_key(key: RotationScalingKey) -> RotationScalingKey:
    """Analytic inverse: per block, (t, u) -> (t, -u) / (t^2 + u^2).

    Inverse scales land in [1/hi, 1/lo]; the bounds are adjusted so the
    result still validates.
    """
    denom = key.t * key.t + key.u * key.u
    lo, hi = key.scale_bounds
    return RotationScalingKey(key.t / denom, -key.u / denom, (1.0 / hi, 1.0 / lo))


@dataclass(frozen=True)
class Permutation:
    """Bijection on {0..size-1}; as a matrix, row r of P@X is X[mapping[r]]."""

    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        object.__setattr__(self, "mapping", m)
        if m.ndim != 1 or m.size < 1:
            raise DimensionError("permutation mapping must be a non-empty 1-d array")
        if not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ConfigError("mapping is not a bijection on {0..size-1}")

    @property
    def size(self) -> int:
        return int(self.mapping.size)

    def to_matrix(self) -> np.ndarray:
        return np.eye(self.size, dtype=np.float64)[self.mapping]


def sample_permutation(b: int, rng: np.random.Generator) -> Permutation:
    """Uniform permutation of b elements (Fisher-Yates over the stream)."""
    if b < 1:
        raise DimensionError(f"permutation size must be >= 1, got {b}")
    return Permutation(rng.permutation(b))


def apply_rows(p: Permutation, x: np.ndarray) -> np.ndarray:
    """Reorder the rows of x: row r of the output is x[mapping[r]]."""
    if x.shape[0] != p.size:
        raise DimensionError(
            f"row count {x.shape[0]} does not match permutation size {p.size}"
        )
    return x[p.mapping]


def inverse(p: Permutation) -> Permutation:
    return Permutation(np.argsort(p.mapping))


class LeastSquaresSolution(NamedTuple):
    x: np.ndarray
    rank: int
    rank_deficient: bool


def solve_least_squares(a: np.ndarray, b: np.ndarray) -> LeastSquaresSolution:
    """Minimize ||AX - B||_F via SVD-backed lstsq (minimum-norm solution).

    Full-column-rank A gives the unique minimizer; otherwise the
    minimum-norm solution is returned and ``rank_deficient`` is set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"coefficient matrix must be 2-d and non-empty, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError("coefficient matrix contains non-finite entries")
    x, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    return LeastSquaresSolution(x, int(rank), int(rank) < a.shape[1])
