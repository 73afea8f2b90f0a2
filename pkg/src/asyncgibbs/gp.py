"""
Gaussian-process regression on an evenly spaced grid.

The latent field ``theta ~ N(mu 1, tau2 H)`` with ``H_ij = exp(-phi |x_i - x_j|)``
is observed with white noise of variance ``sigma2``.  Because the grid is
regular and the kernel exponential, ``H^-1`` is tridiagonal in closed form,
so slices of ``theta`` can be sampled without ever forming an ``n x n``
matrix: the posterior precision is approximated by a tridiagonal Toeplitz
matrix (corner entries replaced by the interior diagonal), whose inverse is
also known elementwise, and products with it are truncated to a band.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .core import (
    ConditionalError,
    GaussianScalar,
    GaussianVector,
    InverseGamma,
    ParameterState,
    TargetModel,
    as_value,
)

PERIOD_HALF = 3.0


def base_function(x):
    """The regression function on ``[-3, 3]``."""
    x = np.asarray(x, dtype=float)
    return 0.3 + 0.4 * x + 0.4 * np.sin(2.7 * x) + 1.1 / (1.0 + x * x)


def reflected_function(x):
    """Continuous extension of :func:`base_function` by mirroring at ``x = 3 + 6k``.

    Mirroring at every odd multiple of 3 makes the extension a triangle-wave
    composition, periodic with period 12.
    """
    x = np.asarray(x, dtype=float)
    u = np.mod(x + PERIOD_HALF, 4 * PERIOD_HALF)  # in [0, 12)
    u = np.where(u > 2 * PERIOD_HALF, 4 * PERIOD_HALF - u, u) - PERIOD_HALF  # fold into [-3, 3]
    return base_function(u)


@dataclass
class GpConfig:
    """Model, prior and sampler settings.

    ``mu ~ N(a_mu, b_mu)`` (``b_mu`` is a variance); ``sigma2 ~ IG(a_sigma, b_sigma)``
    and ``tau2 ~ IG(a_tau, b_tau)`` in shape/scale form.
    """

    n: int = 1200
    rho: float = 0.06
    phi: float = 0.5
    block_size: int = 300
    band_width: Optional[int] = None
    band_tol: float = 1e-10
    a_mu: float = 0.0
    b_mu: float = 100.0
    a_sigma: float = 2.0
    b_sigma: float = 0.05
    a_tau: float = 2.0
    b_tau: float = 0.5
    noise_sd: float = 0.2
    init_mu: float = 10.0
    init_sigma2: float = 10.0
    init_tau2: float = 10.0

    def __post_init__(self):
        if not (self.rho > 0 and self.phi > 0):
            raise ValueError("rho and phi must be positive")
        if self.n < 2 or self.block_size < 1 or self.n % self.block_size:
            raise ValueError(f"block_size {self.block_size} must divide n {self.n}")
        if self.band_width is not None and self.band_width < self.block_size / 2:
            raise ValueError("band_width must be at least block_size / 2")

    @property
    def n_blocks(self) -> int:
        return self.n // self.block_size


@dataclass
class GpState:
    theta: np.ndarray
    mu: float
    sigma2: float
    tau2: float

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.tau2 > 0):
            raise ValueError("sigma2 and tau2 must be positive")


def grid(config: GpConfig) -> np.ndarray:
    """Sorted grid of ``n`` points with spacing ``rho`` centred on 0."""
    return (np.arange(config.n) - config.n // 2) * config.rho


def generate_data(config: GpConfig, seed: int = 0) -> tuple:
    """Noisy observations of :func:`reflected_function` on the grid."""
    cells = 2 * PERIOD_HALF / config.rho
    if abs(cells - round(cells)) > 1e-9 or config.n % int(round(cells)):
        raise ValueError(f"n must be a multiple of the {cells:g} grid cells in one period")
    rng = np.random.default_rng(seed)
    x = grid(config)
    y = reflected_function(x) + config.noise_sd * rng.standard_normal(config.n)
    return x, y


def write_data_csv(path, x, y) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for xi, yi in zip(x, y):
            w.writerow([repr(float(xi)), repr(float(yi))])


def read_data_csv(path) -> tuple:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["x", "y"]:
        raise ValueError(f"{path}: expected header 'x,y'")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    return data[:, 0], data[:, 1]


# ---------------------------------------------------------------------------
# Tridiagonal algebra


@dataclass(frozen=True)
class ToeplitzInverse:
    """Inverse of the exponential correlation matrix on a regular grid.

    Tridiagonal with diagonal ``(d0, b, ..., b, d0)`` and off-diagonals ``a``.
    """

    a: float
    b: float
    d0: float
    dim: int

    def diagonal(self) -> np.ndarray:
        d = np.full(self.dim, self.b)
        d[0] = d[-1] = self.d0
        return d

    def dense(self) -> np.ndarray:
        m = np.diag(self.diagonal())
        i = np.arange(self.dim - 1)
        m[i, i + 1] = m[i + 1, i] = self.a
        return m

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = self.diagonal() * v
        out[:-1] += self.a * v[1:]
        out[1:] += self.a * v[:-1]
        return out

    def quad(self, u, v=None) -> float:
        u = np.asarray(u, dtype=float)
        return float(u @ self.matvec(u if v is None else v))

    def logdet_inverse(self) -> float:
        """``log det`` of this matrix (minus ``log det H``)."""
        r2 = math.exp(-2.0 * self._x)
        return -(self.dim - 1) * math.log1p(-r2)

    @property
    def _x(self) -> float:
        return math.asinh(-0.5 / self.a) if self.a else math.inf


def toeplitz_exp_inverse(phi: float, rho: float, N: int) -> ToeplitzInverse:
    """Closed-form ``H^-1`` for ``H_ij = exp(-phi rho |i - j|)``.

    ``b = -coth(-phi rho)``, ``a = csch(-phi rho) / 2`` and the corner entry
    ``d0 = (1 - coth(-phi rho)) / 2``, which equals ``1 / (1 - exp(-2 phi rho))``.
    """
    x = phi * rho
    if not x > 0:
        raise ValueError("phi * rho must be positive")
    if N < 2:
        raise ValueError("N must be at least 2")
    coth = 1.0 / math.tanh(-x)
    b = -coth
    a = 1.0 / math.sinh(-x) / 2.0
    d0 = (1.0 - coth) / 2.0
    return ToeplitzInverse(a, b, d0, N)


def finite_corner_term(phi: float, rho: float, N: int) -> float:
    """Corner expression carrying an ``exp(-phi rho (2N - 3))`` correction.

    Kept for comparison only: it approaches the exact corner used by
    :func:`toeplitz_exp_inverse` as ``N`` grows but does not invert ``H``
    for small ``N``.
    """
    x = phi * rho
    e = math.exp(-x * (2 * N - 3))
    return (e / math.sinh(-x) + 1.0 - 1.0 / math.tanh(-x)) / (2.0 - 2.0 * e)


def _eta(diag_b: float, offdiag_a: float) -> float:
    if not abs(diag_b) > 2.0 * abs(offdiag_a):
        raise ValueError(f"tridiagonal Toeplitz matrix needs |b| > 2|a| (b={diag_b}, a={offdiag_a})")
    return math.acosh(abs(diag_b) / (2.0 * abs(offdiag_a)))


def tridiag_toeplitz_inverse_entries(diag_b: float, offdiag_a: float, N: int, i, j) -> np.ndarray:
    """Entries ``(T^-1)_ij`` (0-based) of the symmetric tridiagonal Toeplitz matrix ``T``.

    With ``cosh(eta) = |b| / (2|a|)`` and 1-based ``i <= j``::

        (T^-1)_ij = s^(j-i) sgn(b) e^(-(j-i) eta) (1 - e^(-2 i eta)) (1 - e^(-2 (N+1-j) eta))
                    / (2 |a| sinh(eta) (1 - e^(-2 (N+1) eta)))

    where ``s = -sgn(a) sgn(b)``; written with decaying exponentials so it
    cannot overflow for large ``N``.
    """
    i = np.asarray(i)
    j = np.asarray(j)
    if offdiag_a == 0.0:
        return np.where(i == j, 1.0 / diag_b, 0.0)
    eta = _eta(diag_b, offdiag_a)
    lo = np.minimum(i, j) + 1
    hi = np.maximum(i, j) + 1
    k = hi - lo
    s = -math.copysign(1.0, offdiag_a) * math.copysign(1.0, diag_b)
    den = 2.0 * abs(offdiag_a) * math.sinh(eta) * -math.expm1(-2.0 * (N + 1) * eta)
    # every factor depends on one integer in 0..N+1, so tabulate instead of exponentiating per entry
    t = np.arange(N + 2)
    decay = np.exp(-t * eta) * (math.copysign(1.0, diag_b) / den)
    if s < 0:
        decay[1::2] *= -1.0
    edge = -np.expm1(-2.0 * t * eta)
    return decay[k] * edge[lo] * edge[N + 1 - hi]


def band_for_tolerance(diag_b: float, offdiag_a: float, N: int, tol: float = 1e-10) -> int:
    """Smallest band ``w`` such that every entry of ``T^-1`` with ``|i - j| > w`` is below ``tol``."""
    if offdiag_a == 0.0:
        return 0
    eta = _eta(diag_b, offdiag_a)
    c = 1.0 / (2.0 * abs(offdiag_a) * math.sinh(eta) * -math.expm1(-2.0 * (N + 1) * eta))
    if c < tol:
        return 0
    return int(min(N - 1, max(0, math.ceil(math.log(c / tol) / eta) - 1)))


def tridiag_toeplitz_inverse_apply(diag_b: float, offdiag_a: float, N: int, rhs, band_width: Optional[int] = None,
                                   rows=None) -> np.ndarray:
    """``T^-1 rhs`` using only inverse entries with ``|i - j| <= band_width``.

    ``rows`` restricts the output to the given row indices.  The closed form
    factorises as ``decay(|i - j|) * edge(min) * edge(max)``, so the banded
    product reduces to two truncated geometric convolutions.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (N,):
        raise ValueError("rhs must have length N")
    if offdiag_a == 0.0:
        out = rhs / diag_b
        return out if rows is None else out[np.asarray(rows)]
    eta = _eta(diag_b, offdiag_a)
    w = N - 1 if band_width is None else int(min(band_width, N - 1))
    s = -math.copysign(1.0, offdiag_a) * math.copysign(1.0, diag_b)
    den = 2.0 * abs(offdiag_a) * math.sinh(eta) * -math.expm1(-2.0 * (N + 1) * eta)
    t = np.arange(N + 2)
    edge = -np.expm1(-2.0 * t * eta)
    kern = np.exp(-t[: w + 1] * eta)
    if s < 0:
        kern[1::2] *= -1.0
    idx = np.arange(N)
    g = edge[N - idx] * rhs  # column factor when j >= i
    h = edge[idx + 1] * rhs  # column factor when j < i
    upper = np.convolve(g[::-1], kern)[:N][::-1]
    lower = np.convolve(h, kern)[:N] - h
    out = (edge[idx + 1] * upper + edge[N - idx] * lower) * (math.copysign(1.0, diag_b) / den)
    return out if rows is None else out[np.asarray(rows, dtype=int)]


# ---------------------------------------------------------------------------
# Model


class GpTarget(TargetModel):
    """Posterior of ``(theta, mu, sigma2, tau2)`` with ``phi`` fixed.

    Coordinates ``0..K-1`` are the ``theta`` slices (transmitted);
    ``K, K+1, K+2`` are ``mu, sigma2, tau2`` (sampled locally everywhere).
    """

    def __init__(self, config: GpConfig, y):
        self.config = config
        self.y = as_value(y)
        if self.y.shape != (config.n,):
            raise ValueError("y must have length n")
        self.hinv = toeplitz_exp_inverse(config.phi, config.rho, config.n)
        k = config.n_blocks
        self.n_blocks = k
        self.n_coords = k + 3
        self.MU, self.SIGMA2, self.TAU2 = k, k + 1, k + 2
        self.local_coords = (k, k + 1, k + 2)
        self._hinv_one = self.hinv.matvec(np.ones(config.n))
        self._one_hinv_one = float(self._hinv_one.sum())

    def block_slice(self, c: int) -> slice:
        bs = self.config.block_size
        return slice(c * bs, (c + 1) * bs)

    def initial_values(self):
        cfg = self.config
        return ([as_value(np.zeros(cfg.block_size)) for _ in range(self.n_blocks)]
                + [as_value(cfg.init_mu), as_value(cfg.init_sigma2), as_value(cfg.init_tau2)])

    def theta(self, values) -> np.ndarray:
        return np.concatenate(values[: self.n_blocks])

    def gp_state(self, values) -> GpState:
        return GpState(self.theta(values), float(values[self.MU]), float(values[self.SIGMA2]),
                       float(values[self.TAU2]))

    def values_from(self, s: GpState) -> list:
        th = np.asarray(s.theta, dtype=float)
        return ([as_value(th[self.block_slice(c)]) for c in range(self.n_blocks)]
                + [as_value(s.mu), as_value(s.sigma2), as_value(s.tau2)])

    def new_state(self, values=None) -> ParameterState:
        if isinstance(values, GpState):
            values = self.values_from(values)
        return super().new_state(values)

    # -- theta slices

    def posterior_tridiag(self, sigma2: float, tau2: float) -> tuple:
        """``(diagonal, offdiagonal)`` of the Toeplitz approximation to ``H^-1 / tau2 + I / sigma2``."""
        return self.hinv.b / tau2 + 1.0 / sigma2, self.hinv.a / tau2

    def band_width(self, sigma2: float, tau2: float) -> int:
        cfg = self.config
        if cfg.band_width is not None:
            return cfg.band_width
        bd, ad = self.posterior_tridiag(sigma2, tau2)
        return max(band_for_tolerance(bd, ad, cfg.n, cfg.band_tol), cfg.block_size // 2)

    def theta_block_conditional(self, s: GpState, c: int) -> tuple:
        """Approximate conditional ``(mean, covariance)`` of slice ``c`` of ``theta``."""
        mean, bd, ad = self._block_mean(s, c)
        idx = np.arange(mean.size)
        return mean, tridiag_toeplitz_inverse_entries(bd, ad, mean.size, idx[:, None], idx[None, :])

    def _block_mean(self, s: GpState, c: int) -> tuple:
        cfg = self.config
        n = cfg.n
        if not 0 <= c < self.n_blocks:
            raise IndexError(f"block {c} out of range")
        bd, ad = self.posterior_tridiag(s.sigma2, s.tau2)
        if not bd > 2 * abs(ad):
            raise ConditionalError("posterior precision is not diagonally dominant")
        sl = self.block_slice(c)
        start, stop = sl.start, sl.stop
        size = stop - start
        rhs = self._hinv_one * (s.mu / s.tau2) + self.y / s.sigma2
        nbrs = [r for r in (start - 1, stop) if 0 <= r < n]
        rows = np.concatenate([np.arange(start, stop), nbrs]).astype(int)
        # banded approximation of the global posterior mean at the block and its two neighbours
        m = tridiag_toeplitz_inverse_apply(bd, ad, n, rhs, self.band_width(s.sigma2, s.tau2), rows=rows)
        mean = m[:size].copy()
        idx = np.arange(size)
        for k, r in enumerate(nbrs):
            edge = 0 if r < start else size - 1
            col = tridiag_toeplitz_inverse_entries(bd, ad, size, idx, edge)
            mean -= col * (ad * (s.theta[r] - m[size + k]))
        return mean, bd, ad

    def _block_precision(self, bd: float, ad: float, size: int) -> tuple:
        prec = np.diag(np.full(size, bd))
        i = np.arange(size - 1)
        prec[i, i + 1] = prec[i + 1, i] = ad
        # lower bidiagonal Cholesky factor of the tridiagonal precision
        ab = np.zeros((2, size))
        ab[0] = bd
        ab[1, :-1] = ad
        lb = linalg.cholesky_banded(ab, lower=True)
        chol = np.diag(lb[0])
        chol[i + 1, i] = lb[1, :-1]
        return prec, chol

    def sample_theta_block(self, s: GpState, c: int, rng) -> tuple:
        mean, bd, ad = self._block_mean(s, c)
        prec, chol = self._block_precision(bd, ad, mean.size)
        desc = GaussianVector(mean, prec=prec, chol=chol)
        return desc.sample(rng), desc

    # -- hyperparameters

    def sufficient_stats(self, s: GpState) -> dict:
        """Sums the conjugate updates need; the quadratic forms use the exact tridiagonal ``H^-1``."""
        th = np.asarray(s.theta, dtype=float)
        r = self.y - th
        hth = self.hinv.matvec(th)
        return {
            "n": self.config.n,
            "ss_resid": float(r @ r),
            "one_hinv_one": self._one_hinv_one,
            "one_hinv_theta": float(hth.sum()),
            "quad_centered": float(th @ hth) - 2.0 * s.mu * float(hth.sum()) + s.mu * s.mu * self._one_hinv_one,
        }

    def hyper_descriptors(self, s: GpState, stats: dict) -> dict:
        cfg = self.config
        prec = stats["one_hinv_one"] / s.tau2 + 1.0 / cfg.b_mu
        mean = (stats["one_hinv_theta"] / s.tau2 + cfg.a_mu / cfg.b_mu) / prec
        return {
            "mu": GaussianScalar(mean, 1.0 / prec),
            "sigma2": InverseGamma(cfg.a_sigma + 0.5 * stats["n"], cfg.b_sigma + 0.5 * stats["ss_resid"]),
            "tau2": InverseGamma(cfg.a_tau + 0.5 * stats["n"], cfg.b_tau + 0.5 * stats["quad_centered"]),
        }

    def sample_conditional(self, state, c, rng):
        s = self.gp_state(state.values)
        if c < self.n_blocks:
            return self.sample_theta_block(s, c, rng)
        name = {self.MU: "mu", self.SIGMA2: "sigma2", self.TAU2: "tau2"}[c]
        stats = self.sufficient_stats(s)
        desc = self.hyper_descriptors(s, stats)[name]
        return desc.sample(rng), desc

    def log_joint(self, values) -> float:
        cfg = self.config
        s = self.gp_state(values)
        if not (s.sigma2 > 0 and s.tau2 > 0):
            return -math.inf
        n = cfg.n
        r = self.y - s.theta
        z = s.theta - s.mu
        lp = -0.5 * n * math.log(s.sigma2) - 0.5 * float(r @ r) / s.sigma2
        lp += -0.5 * n * math.log(s.tau2) - 0.5 * self.hinv.quad(z) / s.tau2
        lp += -0.5 * (s.mu - cfg.a_mu) ** 2 / cfg.b_mu
        lp += -(cfg.a_sigma + 1) * math.log(s.sigma2) - cfg.b_sigma / s.sigma2
        lp += -(cfg.a_tau + 1) * math.log(s.tau2) - cfg.b_tau / s.tau2
        return lp

    def trace_vector(self, state):
        v = state.values
        return np.concatenate([self.theta(v), [float(v[self.MU]), float(v[self.SIGMA2]), float(v[self.TAU2])]])

    def trace_names(self):
        return [f"theta{i}" for i in range(self.config.n)] + ["mu", "sigma2", "tau2"]


def theta_block_conditional(state: GpState, config: GpConfig, block: int, y) -> tuple:
    return GpTarget(config, y).theta_block_conditional(state, block)


def conjugate_hyper_updates(state: GpState, config: GpConfig, y, sums: Optional[dict] = None, rng=None) -> dict:
    """Draw ``mu``, ``sigma2`` and ``tau2`` from their conjugate full conditionals.

    Each draw conditions on ``state`` as given (not on the other fresh draws).
    Pass ``sums`` to override the sufficient statistics, e.g. zeros with
    ``n = 0`` to recover the priors.
    """
    model = GpTarget(config, y)
    stats = model.sufficient_stats(state) if sums is None else sums
    rng = rng if rng is not None else np.random.default_rng()
    desc = model.hyper_descriptors(state, stats)
    return {k: float(d.sample(rng)) for k, d in desc.items()} | {"descriptors": desc}


__all__ = [
    "GpConfig",
    "GpState",
    "GpTarget",
    "ToeplitzInverse",
    "band_for_tolerance",
    "base_function",
    "conjugate_hyper_updates",
    "finite_corner_term",
    "generate_data",
    "grid",
    "read_data_csv",
    "reflected_function",
    "theta_block_conditional",
    "toeplitz_exp_inverse",
    "tridiag_toeplitz_inverse_apply",
    "tridiag_toeplitz_inverse_entries",
    "write_data_csv",
]
