"""One-sided Jacobi SVD (Hestenes), forward-only."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .tensor import Tensor

MAX_SWEEPS = 100
TOL = 1e-12


@dataclass
class SvdResult:
    singular_values: np.ndarray
    u: np.ndarray | None = None
    vt: np.ndarray | None = None

    def reconstruct(self) -> np.ndarray:
        if self.u is None or self.vt is None:
            raise ValueError("singular vectors were not computed")
        return (self.u * self.singular_values) @ self.vt


def _jacobi_columns(a: np.ndarray, max_sweeps: int, tol: float):
    """Orthogonalize the columns of ``a`` (p x q, p >= q) by plane rotations.

    Returns the rotated matrix and the accumulated right rotation V.
    """
    a = a.copy()
    q = a.shape[1]
    v = np.eye(q)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(q - 1):
            for j in range(i + 1, q):
                ai, aj = a[:, i], a[:, j]
                alpha = ai @ ai
                beta = aj @ aj
                gamma = ai @ aj
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, i], a[:, j] = c * ai - s * aj, s * ai + c * aj
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i], v[:, j] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            return a, v
    raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")


def svd(m, compute_vectors: bool = True, max_sweeps: int = MAX_SWEEPS, tol: float = TOL) -> SvdResult:
    """Thin SVD of a p x q matrix; singular values come back descending."""
    arr = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"svd needs a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("svd received non-finite entries")
    flip = arr.shape[0] < arr.shape[1]
    work = arr.T if flip else arr
    rotated, v = _jacobi_columns(work, max_sweeps, tol)
    sigma = np.linalg.norm(rotated, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    if not compute_vectors:
        return SvdResult(sigma)
    v = v[:, order]
    rotated = rotated[:, order]
    u = np.zeros_like(rotated)
    nz = sigma > 0
    u[:, nz] = rotated[:, nz] / sigma[nz]
    if flip:
        return SvdResult(sigma, u=v, vt=u.T)
    return SvdResult(sigma, u=u, vt=v.T)


def singular_values(m) -> np.ndarray:
    return svd(m, compute_vectors=False).singular_values


def low_rank_singular_values(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Singular values of ``a @ b`` for a (d x r) and b (r x d) without the d x d product.

    With a = QR, sigma(a b) = sigma(R b), an r x d problem.
    """
    r_factor = np.linalg.qr(a, mode="r")
    return singular_values(r_factor @ b)
