"""Encoder-induced metrics and the global input preconditioner.

The barycentric map of each tetra has Jacobian C^-1, so displacements are
measured through M_T = C^-T C^-1. Averaging M_T over a cube's six tetras and
over all axis permutations gives a convention-free SPD metric M_sym; the
preconditioner A* is the unique (up to rotation sign) symmetric matrix with
A*^T M_sym A* = c I and det(A*) = 1, i.e. a volume-preserving whitening of
the average metric.

Eigen-decompositions of 3x3 symmetric matrices use the analytic trigonometric
formula plus spectral projectors so that no iterative-solver tolerance enters
the constants.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .tetgrid import C_UNIT

PERM_MATRICES = tuple(
    np.eye(3)[list(p)] for p in itertools.permutations(range(3))
)


class MetricError(ValueError):
    pass


def _check_spd(m: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise MetricError(f"expected 3x3 matrix, got {m.shape}")
    if np.max(np.abs(m - m.T)) > tol * max(1.0, np.max(np.abs(m))):
        raise MetricError("matrix is not symmetric")
    if np.any(eigvals_sym3(m) <= 0):
        raise MetricError("matrix is not positive definite")
    return 0.5 * (m + m.T)


def eigvals_sym3(m: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a symmetric 3x3 matrix, analytic cubic."""
    m = np.asarray(m, dtype=float)
    q = np.trace(m) / 3.0
    b = m - q * np.eye(3)
    p2 = (b * b).sum() / 6.0
    if p2 < 1e-300:
        return np.full(3, q)
    p = np.sqrt(p2)
    r = np.linalg.det(b / p) / 2.0
    r = min(1.0, max(-1.0, r))
    phi = np.arccos(r) / 3.0
    lam_hi = q + 2.0 * p * np.cos(phi)
    lam_lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    return np.array([lam_lo, 3.0 * q - lam_hi - lam_lo, lam_hi])


def _matfun_sym3(m: np.ndarray, fun) -> np.ndarray:
    """fun(M) for symmetric 3x3 M via spectral projectors (no eigenvectors)."""
    lam = eigvals_sym3(m)
    scale = max(abs(lam[0]), abs(lam[2]), 1e-300)
    eye = np.eye(3)
    # cluster nearly-equal eigenvalues so projectors stay well-conditioned
    if (lam[2] - lam[0]) <= 1e-12 * scale:
        return fun(lam.mean()) * eye
    if (lam[1] - lam[0]) <= 1e-9 * scale:
        # lam0 ~= lam1 < lam2
        p2 = (m - lam[0] * eye) @ (m - lam[1] * eye) / ((lam[2] - lam[0]) * (lam[2] - lam[1]))
        lo = 0.5 * (lam[0] + lam[1])
        return fun(lo) * (eye - p2) + fun(lam[2]) * p2
    if (lam[2] - lam[1]) <= 1e-9 * scale:
        p0 = (m - lam[1] * eye) @ (m - lam[2] * eye) / ((lam[0] - lam[1]) * (lam[0] - lam[2]))
        hi = 0.5 * (lam[1] + lam[2])
        return fun(lam[0]) * p0 + fun(hi) * (eye - p0)
    ps = []
    for i in range(3):
        j, k = {0, 1, 2} - {i}
        ps.append((m - lam[j] * eye) @ (m - lam[k] * eye)
                  / ((lam[i] - lam[j]) * (lam[i] - lam[k])))
    return sum(fun(lam[i]) * ps[i] for i in range(3))


def canonical_tetra_metrics() -> np.ndarray:
    """M_T = C^-T C^-1 for the six canonical unit-cube tetras, shape (6,3,3)."""
    out = np.empty((6, 3, 3))
    for t in range(6):
        cinv = np.linalg.inv(C_UNIT[t])
        out[t] = cinv.T @ cinv
    return out


def tetra_metric(c: np.ndarray) -> np.ndarray:
    """Local metric C^-T C^-1 of a tetra with edge-span matrix C."""
    c = np.asarray(c, dtype=float)
    det = np.linalg.det(c)
    if abs(det) < 1e-300:
        raise MetricError("singular edge-span matrix")
    cinv = np.linalg.inv(c)
    return cinv.T @ cinv


def cube_average_metric(metrics: np.ndarray | None = None) -> np.ndarray:
    """Mean of the six per-tetra metrics of one cube cell."""
    if metrics is None:
        metrics = canonical_tetra_metrics()
    metrics = np.asarray(metrics, dtype=float)
    if metrics.shape != (6, 3, 3):
        raise MetricError(f"expected six 3x3 metrics, got {metrics.shape}")
    return metrics.mean(axis=0)


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Average of P M P^T over the six axis-permutation matrices."""
    m = np.asarray(m, dtype=float)
    return np.mean([p @ m @ p.T for p in PERM_MATRICES], axis=0)


def condition_number(m: np.ndarray) -> float:
    """Spectral condition number lambda_max / lambda_min of an SPD matrix."""
    m = _check_spd(m)
    lam = eigvals_sym3(m)
    return float(lam[2] / lam[0])


@dataclass(frozen=True)
class Preconditioner:
    """Volume-preserving linear input map plus translation.

    matrix^T M_sym matrix = c I with det(matrix) = 1.
    """

    matrix: np.ndarray
    translation: np.ndarray
    c: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.matrix.T + self.translation

    def inverse_apply(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.translation) @ np.linalg.inv(self.matrix).T

    @property
    def row_sum_norm(self) -> float:
        return float(np.max(np.abs(self.matrix).sum(axis=1)))


def solve_preconditioner(m_sym: np.ndarray, translation=None) -> Preconditioner:
    """A* = s M_sym^{-1/2} with s fixed so det(A*) = 1; c = s^2."""
    m_sym = _check_spd(m_sym)
    inv_sqrt = _matfun_sym3(m_sym, lambda lam: lam**-0.5)
    s = np.linalg.det(m_sym) ** (1.0 / 6.0)
    a = s * inv_sqrt
    t = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
    return Preconditioner(matrix=a, translation=t, c=float(s * s))


def apply(x, p: Preconditioner) -> np.ndarray:
    return p.apply(x)


def default_preconditioner() -> Preconditioner:
    """A* for the subdivision convention's actual canonical tetras."""
    return solve_preconditioner(symmetrize(cube_average_metric()))


def condition_report() -> list[dict]:
    """Condition numbers of the canonical metrics before/after A*.

    M_sym first, then the six per-tetra metrics.
    """
    pre = default_preconditioner()
    a = pre.matrix
    msym = symmetrize(cube_average_metric())
    rows = [{
        "case": "M_sym",
        "kappa_before": condition_number(msym),
        "kappa_after": condition_number(a.T @ msym @ a),
    }]
    for t, m in enumerate(canonical_tetra_metrics()):
        rows.append({
            "case": f"M_S{t}",
            "kappa_before": condition_number(m),
            "kappa_after": condition_number(a.T @ m @ a),
        })
    return rows
