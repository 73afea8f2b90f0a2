"""Multivariate Gaussian targets and their block full conditionals."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .core import (
    GaussianScalar,
    GaussianVector,
    ParameterState,
    TargetModel,
    as_value,
)

MAX_DIM = 256


class GaussianTarget(TargetModel):
    """``N(mean, precision^-1)`` with the coordinates grouped into blocks.

    Parameters
    ----------
    mean : array_like, shape (m,)
    precision : array_like, shape (m, m)
        Symmetric positive definite.
    blocks : sequence of sequences of int, optional
        Partition of ``0..m-1``; one coordinate per block by default.
        Singleton blocks carry scalar values, larger blocks vectors.
    """

    def __init__(self, mean, precision, blocks: Optional[Sequence[Sequence[int]]] = None, max_dim: int = MAX_DIM):
        self.mean = as_value(mean)
        self.precision = as_value(precision)
        m = self.mean.size
        if m > max_dim:
            raise ValueError(f"dimension {m} exceeds cap {max_dim}")
        if self.precision.shape != (m, m):
            raise ValueError("precision shape does not match mean")
        if not np.allclose(self.precision, self.precision.T, rtol=0, atol=1e-12 * np.abs(self.precision).max()):
            raise ValueError("precision is not symmetric")
        try:
            self._chol = linalg.cholesky(self.precision, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError("precision is not positive definite") from exc
        if blocks is None:
            blocks = [[i] for i in range(m)]
        self.blocks = [np.asarray(b, dtype=int) for b in blocks]
        flat = np.sort(np.concatenate(self.blocks))
        if not np.array_equal(flat, np.arange(m)):
            raise ValueError("blocks must partition 0..m-1 exactly")
        self.n_coords = len(self.blocks)
        self.dim = m
        self._scalar = [b.size == 1 for b in self.blocks]
        self._all_scalar = all(self._scalar) and all(b[0] == i for i, b in enumerate(self.blocks))
        # per-block precision pieces for conditionals
        self._rest = []
        self._cond = []
        for b in self.blocks:
            rest = np.setdiff1d(np.arange(m), b)
            pbb = self.precision[np.ix_(b, b)]
            try:
                lb = linalg.cholesky(pbb, lower=True)
            except linalg.LinAlgError as exc:
                raise ValueError("singular precision sub-block") from exc
            self._rest.append(rest)
            self._cond.append((pbb, lb, self.precision[np.ix_(b, rest)]))

    @property
    def covariance(self) -> np.ndarray:
        return linalg.cho_solve((self._chol, True), np.eye(self.dim))

    def initial_values(self):
        return [as_value(0.0 if s else np.zeros(b.size)) for s, b in zip(self._scalar, self.blocks)]

    def to_vector(self, values) -> np.ndarray:
        if self._all_scalar:
            return np.array(values, dtype=np.float64)
        x = np.empty(self.dim)
        for b, v in zip(self.blocks, values):
            x[b] = v
        return x

    def from_vector(self, x) -> list:
        return [as_value(x[b[0]] if s else x[b]) for s, b in zip(self._scalar, self.blocks)]

    def new_state(self, values=None) -> ParameterState:
        """State from per-block values or from one full vector of length ``dim``."""
        if isinstance(values, np.ndarray) and values.shape == (self.dim,):
            values = self.from_vector(values)
        return super().new_state(values)

    def conditional_block(self, x: np.ndarray, c: int) -> tuple:
        """Mean and covariance of block ``c`` given the rest of ``x`` (a full vector)."""
        b, rest = self.blocks[c], self._rest[c]
        pbb, lb, pbr = self._cond[c]
        rhs = pbr @ (x[rest] - self.mean[rest])
        mean = self.mean[b] - linalg.cho_solve((lb, True), rhs)
        cov = linalg.cho_solve((lb, True), np.eye(b.size))
        return mean, cov

    def sample_conditional(self, state, c, rng):
        b, rest = self.blocks[c], self._rest[c]
        pbb, lb, pbr = self._cond[c]
        x = self.to_vector(state.values)
        rhs = pbr @ (x[rest] - self.mean[rest])
        if self._scalar[c]:
            prec = pbb[0, 0]
            desc = GaussianScalar(float(self.mean[b[0]] - rhs[0] / prec), float(1.0 / prec))
        else:
            mean = self.mean[b] - linalg.cho_solve((lb, True), rhs)
            desc = GaussianVector(mean, prec=pbb, chol=lb)
        return desc.sample(rng), desc

    def log_joint(self, values) -> float:
        z = self.to_vector(values) - self.mean
        return -0.5 * float(z @ self.precision @ z)

    def log_joint_ratio(self, state, c, new_value) -> float:
        b = self.blocks[c]
        pbb = self._cond[c][0]
        z = self.to_vector(state.values) - self.mean
        if self._scalar[c]:
            i = b[0]
            delta = float(new_value) - self.mean[i] - z[i]
            return -delta * float(self.precision[i] @ z) - 0.5 * delta * delta * pbb[0, 0]
        delta = np.ravel(np.asarray(new_value, dtype=float)) - self.mean[b] - z[b]
        return -float(delta @ (self.precision[b] @ z)) - 0.5 * float(delta @ pbb @ delta)

    def trace_vector(self, state):
        return self.to_vector(state.values)

    def trace_names(self):
        return [f"theta{i}" for i in range(self.dim)]


def build_jacobi_target(dim: int, blocks=None) -> GaussianTarget:
    """Zero-mean target with precision ``0.01 I + ones``: strong negative dependence."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    return GaussianTarget(np.zeros(dim), 0.01 * np.eye(dim) + np.ones((dim, dim)), blocks)


def jacobi_covariance(dim: int) -> np.ndarray:
    """Closed-form inverse of ``0.01 I + ones`` (Sherman-Morrison)."""
    return 100.0 * np.eye(dim) - (100.0 * 100.0 / (1.0 + 100.0 * dim)) * np.ones((dim, dim))


def exponential_covariance(dim: int, phi: float) -> np.ndarray:
    idx = np.arange(dim)
    return np.exp(-phi * np.abs(idx[:, None] - idx[None, :]))


def build_exponential_target(dim: int, phi: float, blocks=None) -> GaussianTarget:
    """Zero-mean unit-variance target with covariance ``exp(-phi |i - j|)``."""
    if dim < 1 or not phi > 0:
        raise ValueError("need dim >= 1 and phi > 0")
    prec = linalg.inv(exponential_covariance(dim, phi))
    prec = 0.5 * (prec + prec.T)
    return GaussianTarget(np.zeros(dim), prec, blocks)


def conditional_block(target: GaussianTarget, state, block: int) -> tuple:
    """Exact conditional ``(mean, covariance)`` of one block given the others."""
    if isinstance(state, ParameterState):
        x = target.to_vector(state.values)
    else:
        x = np.asarray(state, dtype=float)
    if not 0 <= block < target.n_coords:
        raise IndexError(f"block {block} out of range")
    return target.conditional_block(x, block)


def jacobi_iteration_matrix(precision: np.ndarray) -> np.ndarray:
    """``diag(P)^-1 (diag(P) - P)``."""
    d = np.diag(precision)
    return (np.diag(d) - precision) / d[:, None]


def spectral_radius(m: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def jacobi_step(target: GaussianTarget, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Update every coordinate from its full conditional given the *old* values of all others."""
    x = np.asarray(x, dtype=float)
    d = np.diag(target.precision)
    z = x - target.mean
    off = target.precision @ z - d * z
    mean = target.mean - off / d
    return mean + rng.standard_normal(x.size) / np.sqrt(d)


def relative_frobenius_error(sample_cov: np.ndarray, cov: np.ndarray) -> float:
    """Relative Frobenius error of ``sample_cov`` against ``cov``."""
    return float(np.linalg.norm(sample_cov - cov) / np.linalg.norm(cov))


def diagonally_dominant(precision: np.ndarray) -> bool:
    a = np.abs(precision)
    return bool(np.all(2 * np.diag(a) > a.sum(axis=1)))


__all__ = [
    "GaussianTarget",
    "build_jacobi_target",
    "build_exponential_target",
    "conditional_block",
    "exponential_covariance",
    "jacobi_covariance",
    "jacobi_iteration_matrix",
    "jacobi_step",
    "spectral_radius",
    "diagonally_dominant",
    "relative_frobenius_error",
]
