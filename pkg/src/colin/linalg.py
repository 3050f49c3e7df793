"""Dense float64 matrix helpers, a seedable splitmix64 generator and a Jacobi SVD.

Matrices are plain 2-D ``numpy.float64`` arrays.  The helpers here add the
shape checking and JSON round-tripping the rest of the package relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "ConvergenceError",
    "Rng",
    "SvdResult",
    "as_matrix",
    "matmul",
    "transpose",
    "add",
    "sub",
    "scale",
    "frobenius_norm",
    "svd",
    "kaiming_uniform",
    "matrix_to_json",
    "matrix_from_json",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConvergenceError(RuntimeError):
    """Raised when the Jacobi SVD runs out of sweeps."""

    def __init__(self, residual: float, sweeps: int):
        super().__init__(
            f"SVD did not converge after {sweeps} sweeps "
            f"(off-diagonal residual {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


def as_matrix(a) -> np.ndarray:
    """Return ``a`` as a 2-D float64 array (copying only when needed)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    _check_same(a, b, "add")
    return a + b


def sub(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    _check_same(a, b, "sub")
    return a - b


def scale(a, c: float) -> np.ndarray:
    return as_matrix(a) * float(c)


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(math.sqrt(np.sum(a * a)))


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 counter generator.

    The i-th output (1-based) after seeding with ``s`` is
    ``mix64(s + i * 0x9E3779B97F4A7C15 mod 2**64)`` where ``mix64`` is the
    finaliser with multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB and
    shifts 30/27/31.  Because each output depends only on its counter, blocks
    of outputs are produced in one vectorised numpy pass and the stream is
    identical on every platform.

    Doubles take the top 53 bits: ``(u64 >> 11) * 2**-53`` in [0, 1).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._state = self.seed & _MASK64

    @property
    def state(self) -> int:
        return self._state

    def next_u64(self, size: int | None = None):
        n = 1 if size is None else int(size)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            counters = np.uint64(self._state) + steps * _GOLDEN
            out = _mix64(counters)
        self._state = (self._state + n * int(_GOLDEN)) & _MASK64
        return int(out[0]) if size is None else out

    def random(self, size=None):
        """Uniform doubles in [0, 1)."""
        if size is None:
            return float(self.next_u64(1)[0] >> np.uint64(11)) * 2.0**-53
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return low + (high - low) * self.random(size)

    def normal(self, size) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = 1.0 - self.random(half)  # (0, 1], keeps log finite
        u2 = self.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream keyed by ``key``; does not advance self."""
        with np.errstate(over="ignore"):
            child = _mix64(np.array([self._state ^ (int(key) & _MASK64)], dtype=np.uint64)
                           + _GOLDEN)
        return Rng(int(child[0]))


def kaiming_uniform(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / fan_in), fan_in = cols (gain 1)."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"kaiming_uniform needs positive shape, got {rows}x{cols}")
    bound = math.sqrt(6.0 / cols)
    return rng.uniform(-bound, bound, (rows, cols))


# ---------------------------------------------------------------------------
# SVD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # m x r, orthonormal columns
    s: np.ndarray  # r, descending
    v: np.ndarray  # n x r, orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def _complete_orthonormal(basis: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns of ``basis`` not flagged in ``good`` with unit
    vectors orthogonal to everything else (Gram-Schmidt on e_1, e_2, ...)."""
    m, r = basis.shape
    out = basis.copy()
    kept = [out[:, j] for j in range(r) if good[j]]
    candidate = 0
    for j in range(r):
        if good[j]:
            continue
        while True:
            e = np.zeros(m)
            e[candidate % m] = 1.0
            candidate += 1
            for _ in range(2):
                for q in kept:
                    e -= (q @ e) * q
            nrm = np.linalg.norm(e)
            if nrm > 1e-6:
                break
        out[:, j] = e / nrm
        kept.append(out[:, j])
    return out


def _jacobi_tall(a: np.ndarray, tol: float, max_sweeps: int) -> SvdResult:
    m, n = a.shape
    w = a.copy(order="F")
    v = np.eye(n, order="F")
    residual = 0.0
    for _ in range(max_sweeps):
        residual = 0.0
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                wi, wj = w[:, i], w[:, j]
                alpha = wi @ wi
                beta = wj @ wj
                gamma = wi @ wj
                if alpha == 0.0 or beta == 0.0:
                    continue
                off = abs(gamma) / math.sqrt(alpha * beta)
                residual = max(residual, off)
                if off <= tol:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                w[:, i], w[:, j] = c * wi - s * wj, s * wi + c * wj
                vi, vj = v[:, i].copy(), v[:, j]
                v[:, i], v[:, j] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            break
    else:
        raise ConvergenceError(residual, max_sweeps)

    sv = np.linalg.norm(w, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, w, v = sv[order], w[:, order], v[:, order]
    scale_ref = sv[0] if sv.size and sv[0] > 0 else 1.0
    good = sv > 1e-14 * scale_ref
    u = np.zeros_like(w)
    u[:, good] = w[:, good] / sv[good]
    if not good.all():
        sv = np.where(good, sv, 0.0)
        u = _complete_orthonormal(u, good)
    return SvdResult(np.ascontiguousarray(u), sv, np.ascontiguousarray(v))


def svd(a, tol: float = 1e-12, max_sweeps: int = 60) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Columns are rotated pairwise until every pair is orthogonal to within
    ``tol`` relative to their norms.  Wide inputs are handled through their
    transpose.  Returns ``SvdResult`` with ``r = min(m, n)``.
    """
    a = as_matrix(a)
    if a.size == 0:
        raise ShapeError("svd of an empty matrix")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input contains non-finite entries")
    m, n = a.shape
    if m >= n:
        return _jacobi_tall(a, tol, max_sweeps)
    r = _jacobi_tall(a.T, tol, max_sweeps)
    return SvdResult(r.v, r.s, r.u)


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def matrix_to_json(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": [float(x) for x in a.ravel()]}


def matrix_from_json(obj: dict) -> np.ndarray:
    rows, cols = int(obj["rows"]), int(obj["cols"])
    data = obj["data"]
    if len(data) != rows * cols:
        raise ShapeError(f"matrix JSON holds {len(data)} values, expected {rows}x{cols}")
    return np.asarray(data, dtype=np.float64).reshape(rows, cols)
