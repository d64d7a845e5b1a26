"""Dense linear-algebra and fixed-step ODE primitives every other module consumes.

Symmetric eigendecompositions for certification-facing queries run through a
cyclic Jacobi sweep (dimensions here never exceed 32). Batched interior code
paths use LAPACK via numpy; the two routes are cross-checked in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from .errors import (
    DegenerateInputError,
    IntegrationDivergedError,
    InvalidInputError,
)

SYMMETRY_RTOL = 1e-12
#: singular values below this fraction of the largest are treated as zero
SV_ZERO_RTOL = 1e-9


def check_symmetric(a: np.ndarray, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    """Validate that `a` is a finite, square, symmetric matrix and return it as float."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix has non-finite entries")
    scale = np.abs(a).max()
    tol = rtol * max(scale, 1.0)
    if np.abs(a - a.T).max() > tol:
        raise InvalidInputError("matrix is not symmetric within tolerance")
    return a


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60) -> Tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns. Accurate to ~1e-15 relative; intended for n <= 32.
    """
    a = check_symmetric(a)
    n = a.shape[0]
    v = np.eye(n)
    a = a.copy()
    if n == 1:
        return a[0].copy(), v
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0)
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.hypot(1.0, tau)) if tau != 0 else 1.0
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                a[p, q] = a[q, p] = 0.0
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


def spectral_bounds(m: np.ndarray) -> Tuple[float, float]:
    """Minimum and maximum eigenvalue of a symmetric matrix."""
    w, _ = jacobi_eigh(m)
    return float(w[0]), float(w[-1])


def eigvals_sym_batch(ms: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a (..., n, n) stack of symmetric matrices (LAPACK path)."""
    ms = np.asarray(ms, dtype=float)
    return np.linalg.eigvalsh(0.5 * (ms + np.swapaxes(ms, -1, -2)))


def min_positive_singular_value(a: np.ndarray) -> float:
    """Smallest positive singular value of a rectangular matrix.

    Singular values below SV_ZERO_RTOL times the largest one count as zero.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise InvalidInputError(f"expected a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix has non-finite entries")
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.size == 0 or sv[0] <= 0.0:
        raise DegenerateInputError("matrix has no positive singular value")
    positive = sv[sv > SV_ZERO_RTOL * sv[0]]
    if positive.size == 0:
        raise DegenerateInputError("matrix has no positive singular value")
    return float(positive[-1])


@dataclass(frozen=True)
class OdeSolution:
    """Fixed-grid trajectory: `times` strictly increasing, one state row per time."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if times.ndim != 1 or states.ndim != 2 or states.shape[0] != times.shape[0]:
            raise InvalidInputError("times must be (m,), states (m, n)")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise InvalidInputError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def rk4_step(field: Callable[[float, np.ndarray], np.ndarray], t: float, x: np.ndarray, h: float) -> np.ndarray:
    k1 = np.asarray(field(t, x), dtype=float)
    k2 = np.asarray(field(t + 0.5 * h, x + 0.5 * h * k1), dtype=float)
    k3 = np.asarray(field(t + 0.5 * h, x + 0.5 * h * k2), dtype=float)
    k4 = np.asarray(field(t + h, x + h * k3), dtype=float)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(
    field: Callable[[float, np.ndarray], np.ndarray],
    x0: np.ndarray,
    t_span: Tuple[float, float],
    dt: float,
) -> OdeSolution:
    """Classical fixed-step RK4; the final step is shortened to land on t_span[1] exactly."""
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 < t0:
        raise InvalidInputError("t_span must be non-decreasing")
    x = np.array(x0, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("x0 has non-finite entries")
    times = [t0]
    states = [x.copy()]
    t = t0
    while t < t1 - 1e-12 * max(1.0, abs(t1)):
        h = min(dt, t1 - t)
        x = rk4_step(field, t, x, h)
        t = t + h
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError("vector field produced non-finite state", time=t)
        times.append(t)
        states.append(x.copy())
    # snap the accumulated endpoint onto t1 to keep grids exact
    times[-1] = t1 if len(times) > 1 else t0
    return OdeSolution(np.array(times), np.array(states))
