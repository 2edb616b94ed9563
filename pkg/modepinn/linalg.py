"""
Dense kernels and the truncated SVD used to split pretrained weights into a
principal spectrum and an implicit residual tail.
"""

import logging
import struct
from dataclasses import dataclass
from typing import BinaryIO, List, Tuple

import numpy as np

from modepinn.errors import DimensionError, SvdConvergenceError

ORTHONORMAL_TOLERANCE = 1e-10
JACOBI_MAX_SWEEPS = 60
_DIMS_FORMAT = "<QQ"


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    matrix = np.asarray(data, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(
            "{} must be two-dimensional, got shape {}".format(name, matrix.shape)
        )
    if not np.all(np.isfinite(matrix)):
        raise ValueError("{} contains non-finite entries".format(name))
    return matrix


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            "gemm dimension mismatch: {}x{} times {}x{}".format(
                a.shape[0], a.shape[1], b.shape[0], b.shape[1]
            )
        )
    return a @ b


@dataclass(frozen=True, eq=False)
class SvdFactors:
    """Rank-k factors U_k diag(sigma_k) V_k^T of a frozen weight matrix.

    The residual W - U_k diag(sigma_k) V_k^T is never stored.
    """

    u_k: np.ndarray
    sigma_k: np.ndarray
    v_k: np.ndarray

    @property
    def k(self) -> int:
        return int(self.sigma_k.shape[0])

    @property
    def d_out(self) -> int:
        return int(self.u_k.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.v_k.shape[0])

    def orthonormality_defect(self) -> Tuple[float, float]:
        eye = np.eye(self.k)
        return (
            float(np.linalg.norm(self.u_k.T @ self.u_k - eye)),
            float(np.linalg.norm(self.v_k.T @ self.v_k - eye)),
        )

    def check(self) -> None:
        if self.u_k.shape[1] != self.k or self.v_k.shape[1] != self.k:
            raise DimensionError(
                "factor shapes disagree: U {}, sigma {}, V {}".format(
                    self.u_k.shape, self.sigma_k.shape, self.v_k.shape
                )
            )
        if self.k > min(self.d_out, self.d_in):
            raise DimensionError(
                "rank {} exceeds min({}, {})".format(self.k, self.d_out, self.d_in)
            )
        if np.any(self.sigma_k < 0) or np.any(np.diff(self.sigma_k) > 0):
            raise ValueError("singular values must be non-negative and non-increasing")
        u_defect, v_defect = self.orthonormality_defect()
        if u_defect > ORTHONORMAL_TOLERANCE or v_defect > ORTHONORMAL_TOLERANCE:
            raise ValueError(
                "factors are not orthonormal (U defect {:.2e}, V defect {:.2e})".format(
                    u_defect, v_defect
                )
            )


def _round_robin_pairs(m: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Tournament ordering: every round is a set of disjoint column pairs."""
    players = list(range(m)) + ([-1] if m % 2 else [])
    n = len(players)
    rounds = []
    for _ in range(n - 1):
        p, q = [], []
        for i in range(n // 2):
            a, b = players[i], players[n - 1 - i]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _one_sided_jacobi(a: np.ndarray, tol: float, max_sweeps: int):
    """Orthogonalize the columns of a (rows >= cols). Returns (A V, V, sweeps)."""
    work = a.copy()
    m = work.shape[1]
    v = np.eye(m)
    rounds = _round_robin_pairs(m)
    # columns this small carry only round-off and are left alone
    negligible = (np.finfo(np.float64).eps * np.linalg.norm(a)) ** 2
    largest = 0.0
    for sweep in range(1, max_sweeps + 1):
        largest = 0.0
        for p, q in rounds:
            if p.size == 0:
                continue
            col_p = work[:, p]
            col_q = work[:, q]
            alpha = np.einsum("ij,ij->j", col_p, col_p)
            beta = np.einsum("ij,ij->j", col_q, col_q)
            gamma = np.einsum("ij,ij->j", col_p, col_q)
            scale = np.sqrt(alpha * beta)
            significant = (alpha > negligible) & (beta > negligible)
            with np.errstate(divide="ignore", invalid="ignore"):
                cosine = np.where(significant, np.abs(gamma) / scale, 0.0)
            largest = max(largest, float(cosine.max(initial=0.0)))
            rotate = cosine > tol
            if not np.any(rotate):
                continue
            safe_gamma = np.where(rotate, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(rotate, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(rotate, c * t, 0.0)
            work[:, p] = c * col_p - s * col_q
            work[:, q] = s * col_p + c * col_q
            v_p = v[:, p]
            v_q = v[:, q]
            v[:, p] = c * v_p - s * v_q
            v[:, q] = s * v_p + c * v_q
        if largest <= tol:
            return work, v, sweep
    raise SvdConvergenceError(iterations=max_sweeps, off_diagonal=largest)


def _complete_basis(u: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace columns flagged invalid with orthonormal completions."""
    rows = u.shape[0]
    for j in np.flatnonzero(~valid):
        basis = u[:, valid] if np.any(valid) else np.zeros((rows, 0))
        for e in range(rows):
            candidate = np.zeros(rows)
            candidate[e] = 1.0
            for _ in range(2):
                candidate -= basis @ (basis.T @ candidate)
            norm = np.linalg.norm(candidate)
            if norm > 1e-8:
                u[:, j] = candidate / norm
                valid[j] = True
                break
    return u


def _apply_sign_convention(u: np.ndarray, v: np.ndarray) -> None:
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u *= signs
    v *= signs


def svd_full(
    w: np.ndarray, tol: float = 1e-15, max_sweeps: int = JACOBI_MAX_SWEEPS
) -> SvdFactors:
    """Thin SVD of w by one-sided Jacobi on the smaller dimension."""
    w = as_matrix(w, "weight")
    transposed = w.shape[0] < w.shape[1]
    a = w.T if transposed else w
    work, v, sweeps = _one_sided_jacobi(a, tol=tol, max_sweeps=max_sweeps)
    logging.debug("Jacobi SVD of %s matrix converged in %s sweeps", w.shape, sweeps)
    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    floor = np.finfo(np.float64).eps * max(a.shape) * (sigma[0] if sigma.size else 0.0)
    valid = sigma > floor
    u = np.zeros_like(work)
    u[:, valid] = work[:, valid] / sigma[valid]
    sigma = np.where(valid, sigma, 0.0)
    u = _complete_basis(u, valid.copy())
    if transposed:
        u, v = v, u
    u = np.ascontiguousarray(u)
    v = np.ascontiguousarray(v)
    _apply_sign_convention(u, v)
    return SvdFactors(u_k=u, sigma_k=sigma, v_k=v)


def svd_truncate(w: np.ndarray, k: int) -> SvdFactors:
    w = as_matrix(w, "weight")
    if not 1 <= k <= min(w.shape):
        raise DimensionError(
            "truncation rank {} must lie in [1, {}] for a {}x{} matrix".format(
                k, min(w.shape), w.shape[0], w.shape[1]
            )
        )
    full = svd_full(w)
    return SvdFactors(
        u_k=np.ascontiguousarray(full.u_k[:, :k]),
        sigma_k=full.sigma_k[:k].copy(),
        v_k=np.ascontiguousarray(full.v_k[:, :k]),
    )


def reconstruct_principal(f: SvdFactors) -> np.ndarray:
    return (f.u_k * f.sigma_k) @ f.v_k.T


def residual_spectrum(w: np.ndarray, f: SvdFactors) -> np.ndarray:
    """Materialized W - U_k Sigma_k V_k^T. Only oracles use this."""
    w = as_matrix(w, "weight")
    if w.shape != (f.d_out, f.d_in):
        raise DimensionError(
            "weight {} does not match factors {}x{}".format(w.shape, f.d_out, f.d_in)
        )
    return w - reconstruct_principal(f)


def write_matrix(stream: BinaryIO, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(-1, 1)
    elif matrix.ndim == 0:
        matrix = matrix.reshape(1, 1)
    rows, cols = matrix.shape
    stream.write(struct.pack(_DIMS_FORMAT, rows, cols))
    stream.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())


def read_matrix(stream: BinaryIO) -> np.ndarray:
    header = stream.read(struct.calcsize(_DIMS_FORMAT))
    if len(header) != struct.calcsize(_DIMS_FORMAT):
        raise EOFError("truncated matrix header")
    rows, cols = struct.unpack(_DIMS_FORMAT, header)
    payload = stream.read(8 * rows * cols)
    if len(payload) != 8 * rows * cols:
        raise EOFError("truncated matrix payload ({}x{})".format(rows, cols))
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
