"""
Shared types: coordinate values, per-worker parameter state, update messages,
proposal descriptors and the target-model interface.

Coordinate values are dense float64 numpy arrays whose shape is fixed per
coordinate: ``()`` for scalars, ``(k,)`` for vectors and ``(r, c)`` for
matrices.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, special

LOG_2PI = math.log(2.0 * math.pi)


class SupportError(ValueError):
    """Raised when a density is evaluated outside the target's support."""


class ConditionalError(ValueError):
    """Raised when a full conditional is undefined (e.g. not positive definite)."""


def as_value(x) -> np.ndarray:
    """Return a read-only float64 copy of ``x``."""
    v = np.array(x, dtype=np.float64)
    v.flags.writeable = False
    return v


def worker_rng(master_seed: int, worker_id: int) -> np.random.Generator:
    """Counter-based generator for one worker, keyed by ``master_seed ^ worker_id``."""
    return np.random.Generator(np.random.Philox(int(master_seed) ^ int(worker_id)))


def _chol(m: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(m, lower=True)
    except linalg.LinAlgError as exc:
        raise ConditionalError(f"{what} is not positive definite") from exc


# ---------------------------------------------------------------------------
# Proposal descriptors


class ProposalDescriptor(abc.ABC):
    """Parameters of the distribution a coordinate was drawn from."""

    @abc.abstractmethod
    def logpdf(self, v) -> float:
        """Exact log density at ``v``; ``-inf`` outside the support."""

    @abc.abstractmethod
    def sample(self, rng: np.random.Generator) -> np.ndarray:
        ...


@dataclass(frozen=True)
class GaussianScalar(ProposalDescriptor):
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0 or not np.isfinite(self.variance):
            raise ConditionalError(f"variance must be positive, got {self.variance}")

    def logpdf(self, v) -> float:
        z = float(v) - self.mean
        return -0.5 * (LOG_2PI + math.log(self.variance) + z * z / self.variance)

    def sample(self, rng):
        return as_value(self.mean + math.sqrt(self.variance) * rng.standard_normal())


class GaussianVector(ProposalDescriptor):
    """Multivariate normal given by its covariance or by its precision.

    Exactly one of ``cov`` and ``prec`` is used; the Cholesky factor of
    whichever is supplied is computed once at construction.
    """

    __slots__ = ("mean", "cov", "prec", "_chol", "_logdet")

    def __init__(self, mean, cov=None, prec=None, chol=None):
        if (cov is None) == (prec is None):
            raise ValueError("give exactly one of cov or prec")
        self.mean = as_value(mean)
        self.cov = None if cov is None else as_value(cov)
        self.prec = None if prec is None else as_value(prec)
        m = self.cov if cov is not None else self.prec
        if m.shape != (self.mean.size, self.mean.size):
            raise ValueError("mean and matrix shapes disagree")
        self._chol = _chol(m, "covariance" if cov is not None else "precision") if chol is None else chol
        self._logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    def logpdf(self, v) -> float:
        z = np.asarray(v, dtype=np.float64) - self.mean
        if self.cov is not None:
            w = linalg.solve_triangular(self._chol, z, lower=True, check_finite=False)
            quad, logdet = w @ w, self._logdet
        else:
            w = self._chol.T @ z
            quad, logdet = w @ w, -self._logdet
        return -0.5 * (z.size * LOG_2PI + logdet + quad)

    def sample(self, rng):
        z = rng.standard_normal(self.mean.size)
        if self.cov is not None:
            x = self.mean + self._chol @ z
        else:
            x = self.mean + linalg.solve_triangular(self._chol.T, z, lower=False, check_finite=False)
        return as_value(x)

    def __repr__(self):
        kind = "cov" if self.cov is not None else "prec"
        return f"GaussianVector(dim={self.mean.size}, {kind})"


@dataclass(frozen=True)
class InverseGamma(ProposalDescriptor):
    """Inverse-gamma with density ``scale**shape / Gamma(shape) x**(-shape-1) exp(-scale/x)``."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ConditionalError(f"inverse-gamma needs shape, scale > 0, got {self.shape}, {self.scale}")

    def logpdf(self, v) -> float:
        x = float(v)
        if not x > 0:
            return -math.inf
        a, b = self.shape, self.scale
        return a * math.log(b) - special.gammaln(a) - (a + 1.0) * math.log(x) - b / x

    def sample(self, rng):
        return as_value(self.scale / rng.gamma(self.shape))


class InverseWishart(ProposalDescriptor):
    """Inverse-Wishart ``IW(dof, scale)`` on ``d x d`` SPD matrices (mean ``scale / (dof - d - 1)``)."""

    __slots__ = ("dof", "scale", "_chol", "_logdet")

    def __init__(self, dof: float, scale):
        self.scale = as_value(scale)
        d = self.scale.shape[0]
        if not dof > d - 1:
            raise ConditionalError(f"inverse-Wishart needs dof > d - 1, got {dof}")
        self.dof = float(dof)
        self._chol = _chol(self.scale, "inverse-Wishart scale")
        self._logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    def logpdf(self, v) -> float:
        x = np.asarray(v, dtype=np.float64)
        d = self.scale.shape[0]
        if not np.allclose(x, x.T, rtol=0, atol=1e-12 * max(1.0, np.abs(x).max())):
            return -math.inf
        try:
            lx = linalg.cholesky(x, lower=True)
        except linalg.LinAlgError:
            return -math.inf
        logdet_x = 2.0 * float(np.sum(np.log(np.diag(lx))))
        # tr(scale @ x^-1)
        xinv_l = linalg.solve_triangular(lx, self._chol, lower=True)
        tr = float(np.sum(xinv_l * xinv_l))
        n = self.dof
        return (0.5 * n * self._logdet - 0.5 * n * d * math.log(2.0) - special.multigammaln(0.5 * n, d)
                - 0.5 * (n + d + 1) * logdet_x - 0.5 * tr)

    def sample(self, rng):
        # x = (A A^T)^-1 with A A^T ~ Wishart(dof, scale^-1), via Bartlett on scale^-1
        d = self.scale.shape[0]
        a = np.zeros((d, d))
        a[np.diag_indices(d)] = np.sqrt(rng.chisquare(self.dof - np.arange(d)))
        a[np.tril_indices(d, -1)] = rng.standard_normal(d * (d - 1) // 2)
        # chol(scale^-1) = L^-T (upper) ; use the lower factor of scale^-1 via inverse transpose
        linv = linalg.solve_triangular(self._chol, np.eye(d), lower=True)  # L^-1
        w_chol = linv.T @ a  # factor of a Wishart(dof, L^-T L^-1) draw
        w = w_chol @ w_chol.T
        x = linalg.inv(w)
        return as_value(0.5 * (x + x.T))

    def __repr__(self):
        return f"InverseWishart(dof={self.dof}, d={self.scale.shape[0]})"


@dataclass(frozen=True)
class PointMass(ProposalDescriptor):
    value: np.ndarray = field(compare=False)

    def logpdf(self, v) -> float:
        return 0.0 if np.array_equal(np.asarray(v), self.value) else -math.inf

    def sample(self, rng):
        return as_value(self.value)


def proposal_log_density(descriptor: ProposalDescriptor, v) -> float:
    """Log density of ``descriptor`` at ``v`` (``-inf`` outside the support)."""
    return descriptor.logpdf(v)


# ---------------------------------------------------------------------------
# State and messages


class ParameterState:
    """One worker's view of every coordinate.

    ``values[c]`` holds the most recent value of coordinate ``c`` known to the
    worker and ``version[c]`` the ``(origin worker, clock)`` that produced it.
    ``aux`` is free for model-maintained caches.
    """

    __slots__ = ("values", "version", "aux")

    def __init__(self, values: Sequence[np.ndarray], aux=None):
        self.values = [as_value(v) for v in values]
        self.version = {}
        self.aux = aux

    def __getitem__(self, c: int) -> np.ndarray:
        return self.values[c]

    def __len__(self):
        return len(self.values)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.values])

    def copy(self) -> "ParameterState":
        other = ParameterState.__new__(ParameterState)
        other.values = list(self.values)
        other.version = dict(self.version)
        other.aux = self.aux.copy() if hasattr(self.aux, "copy") else self.aux
        return other


@dataclass(frozen=True, slots=True)
class UpdateMessage:
    coord: int
    new_value: np.ndarray
    old_value: np.ndarray
    proposal: ProposalDescriptor
    sender: int
    clock: int
    data_ref: Optional[int] = None


# ---------------------------------------------------------------------------
# Target models


class TargetModel(abc.ABC):
    """Interface every target distribution implements.

    Subclasses set ``n_coords`` and ``local_coords`` (coordinates sampled on
    every worker and never transmitted) and implement the full conditionals.
    """

    n_coords: int
    local_coords: tuple = ()

    @property
    def transmitted_coords(self) -> tuple:
        local = set(self.local_coords)
        return tuple(c for c in range(self.n_coords) if c not in local)

    @abc.abstractmethod
    def initial_values(self) -> list:
        ...

    def new_state(self, values=None) -> ParameterState:
        return ParameterState(self.initial_values() if values is None else values)

    @abc.abstractmethod
    def sample_conditional(self, state: ParameterState, c: int, rng) -> tuple:
        """Draw coordinate ``c`` from its full conditional; returns ``(value, descriptor)``."""

    @abc.abstractmethod
    def log_joint(self, values: Sequence[np.ndarray]) -> float:
        """Unnormalized log joint density."""

    def log_joint_ratio(self, state: ParameterState, c: int, new_value) -> float:
        vals = list(state.values)
        vals[c] = np.asarray(new_value, dtype=np.float64)
        return self.log_joint(vals) - self.log_joint(state.values)

    def assign(self, state: ParameterState, c: int, value: np.ndarray) -> None:
        state.values[c] = value

    def data_ref(self, c: int) -> Optional[int]:
        """Index of the data point a transmitted coordinate belongs to, if any."""
        return None

    def coord_shape(self, c: int) -> tuple:
        return np.shape(self.initial_values()[c])

    def trace_vector(self, state: ParameterState) -> np.ndarray:
        """Quantities recorded in traces and moment accumulators."""
        return state.flat()

    def trace_names(self) -> list:
        return [f"x{i}" for i in range(self.trace_vector(self.new_state()).size)]


def log_joint_ratio(model: TargetModel, state: ParameterState, coord: int, new_value) -> float:
    """``log f(state with coord <- new_value) - log f(state)``."""
    if np.shape(new_value) != np.shape(state.values[coord]):
        raise ValueError(f"coordinate {coord}: shape {np.shape(new_value)} != {np.shape(state.values[coord])}")
    r = model.log_joint_ratio(state, coord, new_value)
    if not math.isfinite(r):
        raise SupportError(f"non-finite log density ratio at coordinate {coord}")
    return r


def sample_full_conditional(model: TargetModel, state: ParameterState, coord: int, rng) -> tuple:
    if not 0 <= coord < model.n_coords:
        raise IndexError(f"coordinate {coord} out of range 0..{model.n_coords - 1}")
    return model.sample_conditional(state, coord, rng)
