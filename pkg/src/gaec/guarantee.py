"""Residual PCA basis and the per-patch l2 guarantee loop.

Every patch leaves :func:`correct_patch` with ``||x - x_G||_2 <= tau`` measured on
the float32 values the decoder will actually emit. When quantized coefficients
cannot get there, the patch falls back to storing its raw samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .entropy import quantize_array
from .errors import BoundUnattainableError

SEARCH_MODES = ("screened", "linear")
_MAX_CHUNK = 512


@dataclass(frozen=True)
class ResidualBasis:
    """Orthonormal columns ``U`` (D x K) sorted by non-increasing eigenvalue."""

    U: np.ndarray
    eigenvalues: np.ndarray
    n_train: int = 0

    def __post_init__(self):
        U = np.ascontiguousarray(self.U, dtype=np.float64)
        if U.ndim != 2 or U.shape[1] > U.shape[0]:
            raise ValueError(f"basis must be D x K with K <= D, got {U.shape}")
        ev = np.asarray(self.eigenvalues, dtype=np.float64)
        if ev.shape != (U.shape[1],):
            raise ValueError("one eigenvalue per basis column required")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "eigenvalues", ev)

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    @property
    def k(self) -> int:
        return self.U.shape[1]

    def truncated(self, k: int) -> "ResidualBasis":
        k = max(0, min(int(k), self.k))
        return ResidualBasis(self.U[:, :k], self.eigenvalues[:k], self.n_train)

    def stored(self, k: int | None = None) -> "ResidualBasis":
        """The basis as the archive holds it: float32 values, optionally truncated."""
        b = self if k is None else self.truncated(k)
        return ResidualBasis(b.U.astype(np.float32).astype(np.float64),
                             b.eigenvalues.astype(np.float32).astype(np.float64), b.n_train)

    def orthonormality_error(self) -> float:
        g = self.U.T @ self.U
        return float(np.abs(g - np.eye(self.k)).max()) if self.k else 0.0

    @classmethod
    def identity(cls, dim: int) -> "ResidualBasis":
        return cls(np.eye(dim), np.ones(dim), 0)


class SecondMoment:
    """Running sum of r r^T over residual vectors; partial sums merge associatively."""

    def __init__(self, dim: int):
        self.gram = np.zeros((dim, dim))
        self.count = 0

    def add(self, residuals: np.ndarray) -> "SecondMoment":
        r = np.asarray(residuals, dtype=np.float64)
        if r.ndim == 1:
            r = r[None, :]
        if r.shape[1] != self.gram.shape[0]:
            raise ValueError(f"residual dimension {r.shape[1]} != {self.gram.shape[0]}")
        if not np.all(np.isfinite(r)):
            raise ValueError("residuals contain non-finite values")
        self.gram += r.T @ r
        self.count += r.shape[0]
        return self

    def merge(self, other: "SecondMoment") -> "SecondMoment":
        self.gram += other.gram
        self.count += other.count
        return self


def _fix_signs(V: np.ndarray) -> np.ndarray:
    # first component above noise level made positive
    thresh = 1e-10
    for j in range(V.shape[1]):
        nz = np.flatnonzero(np.abs(V[:, j]) > thresh)
        if nz.size and V[nz[0], j] < 0:
            V[:, j] = -V[:, j]
    return V


def train_basis(residuals: np.ndarray | Iterable[np.ndarray] | SecondMoment) -> ResidualBasis:
    """Eigenvectors of the residual second-moment matrix, eigenvalues descending.

    ``residuals`` may be an (N, D) array, an iterable of such chunks, or a
    pre-accumulated :class:`SecondMoment`.
    """
    if isinstance(residuals, SecondMoment):
        acc = residuals
    elif isinstance(residuals, np.ndarray):
        acc = SecondMoment(residuals.reshape(len(residuals), -1).shape[1]).add(residuals)
    else:
        acc = None
        for chunk in residuals:
            chunk = np.asarray(chunk, dtype=np.float64)
            if chunk.ndim == 1:
                chunk = chunk[None, :]
            if acc is None:
                acc = SecondMoment(chunk.shape[1])
            acc.add(chunk)
        if acc is None:
            raise ValueError("no residual samples")
    if acc.count < 2:
        raise ValueError("at least two residual samples are needed to train a basis")
    moment = acc.gram / acc.count
    w, V = np.linalg.eigh((moment + moment.T) / 2)
    w = w[::-1].copy()
    V = _fix_signs(np.ascontiguousarray(V[:, ::-1]))
    w[(w < 0) & (w > -1e-9 * max(1.0, abs(w[0])))] = 0.0
    return ResidualBasis(V, w, acc.count)


def project(x: np.ndarray, x_r: np.ndarray, basis: ResidualBasis) -> np.ndarray:
    """Coefficients ``U^T (x - x_r)``."""
    x = np.asarray(x, dtype=np.float64)
    x_r = np.asarray(x_r, dtype=np.float64)
    if x.shape != x_r.shape or x.shape != (basis.dim,):
        raise ValueError(f"shape mismatch: x {x.shape}, x_R {x_r.shape}, basis dim {basis.dim}")
    return basis.U.T @ (x - x_r)


@dataclass
class Correction:
    """What one patch stores: selected indices (ascending) with their quantized coefficients."""

    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    bins: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    coeffs_q: np.ndarray = field(default_factory=lambda: np.zeros(0))
    achieved_error: float = 0.0
    fallback: np.ndarray | None = None

    @property
    def m(self) -> int:
        return int(self.indices.size)

    @property
    def empty(self) -> bool:
        return self.m == 0 and self.fallback is None


def greedy_order(c: np.ndarray) -> np.ndarray:
    """Coefficient indices by decreasing c^2, ties to the lower index."""
    c = np.asarray(c, dtype=np.float64)
    return np.lexsort((np.arange(c.size), -(c * c)))


def form_reconstruction(x_r: np.ndarray, U: np.ndarray, indices: np.ndarray, coeffs_q: np.ndarray) -> np.ndarray:
    """``float32(x_R + U_s c_q)``; the single code path shared by encoder and decoder."""
    base = np.asarray(x_r, dtype=np.float32).astype(np.float64)
    if len(indices) == 0:
        return base.astype(np.float32)
    us = np.ascontiguousarray(U[:, indices])
    return (base + (us * np.asarray(coeffs_q, dtype=np.float64)).sum(axis=1)).astype(np.float32)


def apply_correction(x_r: np.ndarray, basis: ResidualBasis, corr: Correction) -> np.ndarray:
    """Decode-side reconstruction of one patch."""
    if corr.fallback is not None:
        return np.asarray(corr.fallback, dtype=np.float32).copy()
    idx = np.asarray(corr.indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= basis.k):
        raise IndexError(f"basis index out of range [0, {basis.k})")
    return form_reconstruction(x_r, basis.U, idx, corr.coeffs_q)


def _masked_norm(v: np.ndarray, valid: np.ndarray | None) -> float:
    if valid is not None:
        v = v[valid]
    return float(np.sqrt(np.dot(v, v)))


def correct_patch(x: np.ndarray, x_r: np.ndarray, basis: ResidualBasis, tau: float, d: float,
                  valid: np.ndarray | None = None, search: str = "screened",
                  allow_fallback: bool = True) -> tuple[np.ndarray, Correction]:
    """Bring one patch within ``tau`` (l2 over valid cells) of ``x``.

    Coefficients of ``U^T (x - x_R)`` are taken in order of decreasing square
    (ties: lower index first), quantized with bin ``d``, and the smallest count M
    whose reconstruction meets ``tau`` is kept. ``search="linear"`` evaluates every
    M in turn; the default screens candidates with a cheap incremental error and
    only confirms those that can pass, yielding the same M.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not d > 0:
        raise ValueError("bin size must be positive")
    if search not in SEARCH_MODES:
        raise ValueError(f"search must be one of {SEARCH_MODES}")
    x32 = np.asarray(x, dtype=np.float32)
    xr32 = np.asarray(x_r, dtype=np.float32)
    if x32.shape != (basis.dim,) or xr32.shape != (basis.dim,):
        raise ValueError(f"patch vectors must have length {basis.dim}")
    if not (np.all(np.isfinite(x32)) and np.all(np.isfinite(xr32))):
        raise ValueError("non-finite patch values")
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.all():
            valid = None
    xv = x32.astype(np.float64)
    resid = xv - xr32
    if valid is not None:
        resid[~valid] = 0.0
    delta = _masked_norm(resid, None)
    if delta <= tau:
        return xr32.copy(), Correction(achieved_error=delta)

    U = basis.U
    k = basis.k
    c = U.T @ resid
    order = greedy_order(c)
    bins, reps = quantize_array(c, d)

    def canonical(m: int) -> tuple[np.ndarray, float]:
        idx = np.sort(order[:m])
        xg = form_reconstruction(xr32, U, idx, reps[idx])
        return xg, _masked_norm(xv - xg, valid)

    def accept(m: int, xg: np.ndarray, err: float):
        idx = np.sort(order[:m])
        return xg, Correction(idx.astype(np.int64), bins[idx], reps[idx], err)

    if search == "linear":
        for m in range(1, k + 1):
            xg, err = canonical(m)
            if err <= tau:
                return accept(m, xg, err)
    else:
        # float32 output rounding and summation order move the error by far less than this
        margin = 2.0 ** -22 * (_masked_norm(xv, valid) + float(np.linalg.norm(xr32)) + float(np.linalg.norm(reps)) + tau)
        err_vec = resid
        m0 = 0
        step = 16
        while m0 < k:
            m1 = min(k, m0 + step)
            sel = order[m0:m1]
            E = err_vec[:, None] - np.cumsum(U[:, sel] * reps[sel], axis=1)
            if valid is not None:
                E[~valid] = 0.0
            norms = np.sqrt(np.einsum("ij,ij->j", E, E))
            for j in np.flatnonzero(norms <= tau + margin):
                xg, err = canonical(m0 + j + 1)
                if err <= tau:
                    return accept(m0 + j + 1, xg, err)
            err_vec = E[:, -1]
            m0 = m1
            step = min(2 * step, _MAX_CHUNK)

    if not allow_fallback:
        raise BoundUnattainableError(f"patch cannot reach tau={tau} with {k} quantized coefficients")
    return x32.copy(), Correction(fallback=x32.copy(), achieved_error=0.0)
