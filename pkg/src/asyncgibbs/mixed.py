"""
Hierarchical mixed-effects regression::

    y_i = F_i beta_i + W_i gamma + eps_i,   eps_i ~ N(0, nu I)
    beta_i ~ N(mu, Sigma)
    mu ~ N(0, kappa_mu I), Sigma ~ IW(d + 1, I), gamma ~ N(0, kappa_gamma I), nu ~ IG(eps/2, eps/2)

The per-user effects ``beta_i`` are the transmitted coordinates; ``mu``,
``Sigma``, ``gamma`` and ``nu`` are sampled locally on every worker from a
cache of sums over users, so no top-level update touches all ``n`` users.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .core import (
    LOG_2PI,
    ConditionalError,
    GaussianVector,
    InverseGamma,
    InverseWishart,
    ParameterState,
    TargetModel,
    UpdateMessage,
    as_value,
)
from .diagnostics import relative_drift

AUDIT_EVERY = 10_000


@dataclass
class MixedModelData:
    """Per-user design and response arrays.

    ``y`` has shape ``(n, T - p)``, ``F`` ``(n, T - p, d)`` and ``W``
    ``(n, T - p, T - p)``.  ``truth`` optionally holds the generating values.
    """

    y: np.ndarray
    F: np.ndarray
    W: np.ndarray
    T: int
    p: int
    kappa_mu: float = 10.0
    kappa_gamma: float = 10.0
    eps: float = 1.0
    truth: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.F = np.asarray(self.F, dtype=float)
        self.W = np.asarray(self.W, dtype=float)
        n, k = self.y.shape
        if n < 1:
            raise ValueError("need at least one user")
        if k != self.T - self.p:
            raise ValueError(f"y rows have length {k}, expected T - p = {self.T - self.p}")
        if self.F.shape[:2] != (n, k) or self.F.ndim != 3:
            raise ValueError("F must have shape (n, T - p, d)")
        if self.W.shape != (n, k, k):
            raise ValueError("W must have shape (n, T - p, T - p)")
        if not (self.kappa_mu > 0 and self.kappa_gamma > 0 and self.eps > 0):
            raise ValueError("hyperparameters must be positive")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.F.shape[2]

    @property
    def k(self) -> int:
        return self.T - self.p


def generate_mixed_data(n: int = 1000, d: int = 3, T: int = 13, p: int = 1, seed: int = 0, kappa_mu: float = 10.0,
                        kappa_gamma: float = 10.0, eps: float = 1.0) -> MixedModelData:
    """Standard-normal designs and true parameters drawn from the priors."""
    rng = np.random.default_rng(seed)
    k = T - p
    if k < 1 or d < 1:
        raise ValueError("need T > p and d >= 1")
    mu = rng.normal(0.0, math.sqrt(kappa_mu), d)
    sigma = np.asarray(InverseWishart(d + 1, np.eye(d)).sample(rng))
    gamma = rng.normal(0.0, math.sqrt(kappa_gamma), k)
    nu = float(InverseGamma(eps / 2, eps / 2).sample(rng))
    F = rng.standard_normal((n, k, d))
    W = rng.standard_normal((n, k, k))
    beta = rng.multivariate_normal(mu, sigma, size=n)
    y = np.einsum("nkd,nd->nk", F, beta) + W @ gamma + math.sqrt(nu) * rng.standard_normal((n, k))
    truth = {"mu": mu, "Sigma": sigma, "gamma": gamma, "nu": nu, "beta": beta}
    return MixedModelData(y, F, W, T, p, kappa_mu, kappa_gamma, eps, truth)


def write_jsonl(path, data: MixedModelData) -> None:
    head = {"n": data.n, "d": data.d, "T": data.T, "p": data.p, "kappa_mu": data.kappa_mu,
            "kappa_gamma": data.kappa_gamma, "eps": data.eps,
            "truth": {k: np.asarray(v).tolist() for k, v in data.truth.items()}}
    with open(path, "w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for i in range(data.n):
            rec = {"i": i, "y": data.y[i].tolist(), "F": data.F[i].tolist(), "W": data.W[i].tolist()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> MixedModelData:
    with open(path) as fh:
        head = json.loads(fh.readline())
        recs = [json.loads(line) for line in fh if line.strip()]
    if len(recs) != head["n"] or [r["i"] for r in recs] != list(range(head["n"])):
        raise ValueError(f"{path}: expected {head['n']} user records in order")
    truth = {k: (np.asarray(v) if isinstance(v, list) else v) for k, v in head.get("truth", {}).items()}
    return MixedModelData(np.array([r["y"] for r in recs]), np.array([r["F"] for r in recs]),
                          np.array([r["W"] for r in recs]), head["T"], head["p"], head["kappa_mu"],
                          head["kappa_gamma"], head["eps"], truth)


@dataclass
class MixedState:
    beta: np.ndarray  # (n, d)
    mu: np.ndarray
    Sigma: np.ndarray
    gamma: np.ndarray
    nu: float

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        s = np.asarray(self.Sigma)
        if not np.allclose(s, s.T):
            raise ValueError("Sigma must be symmetric")
        try:
            linalg.cholesky(s)
        except linalg.LinAlgError as exc:
            raise ValueError("Sigma must be positive definite") from exc


class _Aggregates:
    """Per-user products of the fixed data, computed once."""

    def __init__(self, data: MixedModelData):
        F, W, y = data.F, data.W, data.y
        self.FtF = np.einsum("nki,nkj->nij", F, F)
        self.Fty = np.einsum("nki,nk->ni", F, y)
        self.FtW = np.einsum("nki,nkj->nij", F, W)
        self.Wty = np.einsum("nki,nk->ni", W, y)
        self.yty = np.einsum("nk,nk->n", y, y)
        self.WtW_sum = np.einsum("nki,nkj->ij", W, W)
        self.Wty_sum = self.Wty.sum(axis=0)


class StatCache:
    """Running sums over users.

    ``beta_sum``, ``S_outer = sum beta_i beta_i^T``, ``g = sum W_i^T (y_i - F_i beta_i)``
    and ``l0 = sum |y_i - F_i beta_i|^2``.  The centred scatter matrix and the
    full residual sum of squares are formed on read, so ``mu`` and ``gamma``
    updates leave the cache untouched.
    """

    __slots__ = ("beta_sum", "S_outer", "g", "l0", "n", "updates", "audit_every", "max_drift", "audits")

    def __init__(self, beta_sum, S_outer, g, l0, n, audit_every=AUDIT_EVERY):
        self.beta_sum = beta_sum
        self.S_outer = S_outer
        self.g = g
        self.l0 = float(l0)
        self.n = n
        self.updates = 0
        self.audit_every = audit_every
        self.max_drift = 0.0
        self.audits = 0

    @classmethod
    def from_beta(cls, beta: np.ndarray, agg: _Aggregates, audit_every=AUDIT_EVERY) -> "StatCache":
        beta = np.asarray(beta, dtype=float)
        g = agg.Wty_sum - np.einsum("nij,ni->j", agg.FtW, beta)
        l0 = float(agg.yty.sum() - 2.0 * np.einsum("ni,ni->", beta, agg.Fty)
                   + np.einsum("ni,nij,nj->", beta, agg.FtF, beta))
        return cls(beta.sum(axis=0), beta.T @ beta, g, l0, beta.shape[0], audit_every)

    def copy(self) -> "StatCache":
        out = StatCache(self.beta_sum.copy(), self.S_outer.copy(), self.g.copy(), self.l0, self.n, self.audit_every)
        out.updates, out.max_drift, out.audits = self.updates, self.max_drift, self.audits
        return out

    @property
    def beta_bar(self) -> np.ndarray:
        return self.beta_sum / self.n

    def scatter(self, mu) -> np.ndarray:
        """``sum (beta_i - mu)(beta_i - mu)^T``."""
        mu = np.asarray(mu, dtype=float)
        cross = np.outer(mu, self.beta_sum)
        s = self.S_outer - cross - cross.T + self.n * np.outer(mu, mu)
        return 0.5 * (s + s.T)

    def rss(self, gamma, WtW_sum) -> float:
        """``sum |y_i - F_i beta_i - W_i gamma|^2``."""
        gamma = np.asarray(gamma, dtype=float)
        return self.l0 - 2.0 * float(gamma @ self.g) + float(gamma @ WtW_sum @ gamma)

    def drift_from(self, other: "StatCache") -> float:
        return max(relative_drift(self.beta_sum, other.beta_sum), relative_drift(self.S_outer, other.S_outer),
                   relative_drift(self.g, other.g), relative_drift(self.l0, other.l0))


def cache_update(cache: StatCache, i: int, beta_old, beta_new, data: MixedModelData, agg: Optional[_Aggregates] = None
                 ) -> StatCache:
    """Swap user ``i``'s contribution from ``beta_old`` to ``beta_new`` in place; O(d (T - p)).

    With ``beta_new == beta_old`` every increment is exactly zero, so the cache is unchanged bitwise.
    """
    agg = agg if agg is not None else _Aggregates(data)
    old = np.asarray(beta_old, dtype=float)
    new = np.asarray(beta_new, dtype=float)
    delta = new - old
    cache.beta_sum += delta
    cache.S_outer += new[:, None] * new - old[:, None] * old
    cache.g -= delta @ agg.FtW[i]
    # |y - F new|^2 - |y - F old|^2 = delta' FtF (new + old) - 2 delta' Fty
    cache.l0 += float(delta @ (agg.FtF[i] @ (new + old) - 2.0 * agg.Fty[i]))
    cache.updates += 1
    return cache


class MixedTarget(TargetModel):
    """Posterior of the mixed-effects model.

    Coordinates ``0..n-1`` are ``beta_i``; then ``mu``, ``Sigma``, ``gamma``, ``nu``.
    Each worker's ``state.aux`` is its :class:`StatCache`.
    """

    def __init__(self, data: MixedModelData, audit_every: int = AUDIT_EVERY):
        self.data = data
        self.agg = _Aggregates(data)
        n = data.n
        self.n_users = n
        self.MU, self.SIGMA, self.GAMMA, self.NU = n, n + 1, n + 2, n + 3
        self.n_coords = n + 4
        self.local_coords = (n, n + 1, n + 2, n + 3)
        self.audit_every = audit_every
        self._inv_key = None
        self._inv = None

    # -- state handling

    def initial_values(self):
        d, k = self.data.d, self.data.k
        return ([as_value(np.zeros(d)) for _ in range(self.n_users)]
                + [as_value(np.zeros(d)), as_value(np.eye(d)), as_value(np.zeros(k)), as_value(1.0)])

    def new_state(self, values=None) -> ParameterState:
        if isinstance(values, MixedState):
            values = self.values_from(values)
        st = super().new_state(values)
        st.aux = StatCache.from_beta(np.array(st.values[: self.n_users]), self.agg, self.audit_every)
        return st

    def values_from(self, s: MixedState) -> list:
        return ([as_value(b) for b in np.asarray(s.beta, dtype=float)]
                + [as_value(s.mu), as_value(s.Sigma), as_value(s.gamma), as_value(s.nu)])

    def mixed_state(self, values) -> MixedState:
        return MixedState(np.array(values[: self.n_users]), np.asarray(values[self.MU]),
                          np.asarray(values[self.SIGMA]), np.asarray(values[self.GAMMA]), float(values[self.NU]))

    def assign(self, state, c, value):
        if c < self.n_users:
            cache_update(state.aux, c, state.values[c], value, self.data, self.agg)
            state.values[c] = value
            if state.aux.updates % state.aux.audit_every == 0:
                self.audit(state)
        else:
            state.values[c] = value

    def audit(self, state) -> float:
        """Compare the cache with a recomputation, record the drift and refresh."""
        scratch = StatCache.from_beta(np.array(state.values[: self.n_users]), self.agg, state.aux.audit_every)
        drift = state.aux.drift_from(scratch)
        old = state.aux
        scratch.updates, scratch.audits = old.updates, old.audits + 1
        scratch.max_drift = max(old.max_drift, drift)
        state.aux = scratch
        return drift

    def data_ref(self, c):
        return c if c < self.n_users else None

    def _sigma_inv(self, sigma: np.ndarray) -> np.ndarray:
        if self._inv_key is not sigma:
            try:
                ch = linalg.cho_factor(sigma, lower=True)
            except linalg.LinAlgError as exc:
                raise ConditionalError("Sigma is not positive definite") from exc
            self._inv = linalg.cho_solve(ch, np.eye(sigma.shape[0]))
            self._inv_key = sigma
        return self._inv

    # -- full conditionals

    def beta_descriptor(self, values, i: int) -> GaussianVector:
        v = values
        nu = float(v[self.NU])
        sinv = self._sigma_inv(v[self.SIGMA])
        prec = self.agg.FtF[i] / nu + sinv
        rhs = (self.agg.Fty[i] - self.agg.FtW[i] @ v[self.GAMMA]) / nu + sinv @ v[self.MU]
        try:
            ch = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError as exc:
            raise ConditionalError(f"beta_{i} precision is not positive definite") from exc
        mean = np.linalg.solve(prec, rhs)
        return GaussianVector(mean, prec=prec, chol=ch)

    def top_descriptor(self, values, cache: StatCache, which: str):
        data, agg = self.data, self.agg
        d, k, n = data.d, data.k, cache.n
        v = values
        if which == "mu":
            sinv = self._sigma_inv(v[self.SIGMA])
            prec = n * sinv + np.eye(d) / data.kappa_mu
            ch = _chol(prec, "mu")
            return GaussianVector(linalg.cho_solve((ch, True), sinv @ cache.beta_sum), prec=prec, chol=ch)
        if which == "Sigma":
            return InverseWishart(d + 1 + n, np.eye(d) + cache.scatter(v[self.MU]))
        if which == "gamma":
            nu = float(v[self.NU])
            prec = agg.WtW_sum / nu + np.eye(k) / data.kappa_gamma
            ch = _chol(prec, "gamma")
            return GaussianVector(linalg.cho_solve((ch, True), cache.g / nu), prec=prec, chol=ch)
        if which == "nu":
            rss = cache.rss(v[self.GAMMA], agg.WtW_sum)
            return InverseGamma(0.5 * (data.eps + n * k), 0.5 * (data.eps + rss))
        raise ValueError(f"unknown top-level variable {which!r}")

    def sample_conditional(self, state, c, rng):
        if c < self.n_users:
            desc = self.beta_descriptor(state.values, c)
        else:
            which = {self.MU: "mu", self.SIGMA: "Sigma", self.GAMMA: "gamma", self.NU: "nu"}[c]
            desc = self.top_descriptor(state.values, state.aux, which)
        return desc.sample(rng), desc

    # -- densities

    def user_log_density(self, values, i: int, b) -> float:
        """``log N(y_i | F_i b + W_i gamma, nu I) + log N(b | mu, Sigma)`` up to constants shared by all ``b``."""
        v = values
        nu = float(v[self.NU])
        b = np.asarray(b, dtype=float)
        r = self.data.y[i] - self.data.F[i] @ b - self.data.W[i] @ v[self.GAMMA]
        z = b - v[self.MU]
        return -0.5 * float(r @ r) / nu - 0.5 * float(z @ self._sigma_inv(v[self.SIGMA]) @ z)

    def log_joint_ratio(self, state, c, new_value):
        if c < self.n_users:
            return self.user_log_density(state.values, c, new_value) - self.user_log_density(state.values, c,
                                                                                            state.values[c])
        return super().log_joint_ratio(state, c, new_value)

    def log_joint(self, values) -> float:
        data = self.data
        d, k, n = data.d, data.k, self.n_users
        mu = np.asarray(values[self.MU])
        sigma = np.asarray(values[self.SIGMA])
        gamma = np.asarray(values[self.GAMMA])
        nu = float(values[self.NU])
        if not nu > 0:
            return -math.inf
        try:
            ch = linalg.cholesky(sigma, lower=True)
        except linalg.LinAlgError:
            return -math.inf
        beta = np.array(values[:n])
        r = data.y - np.einsum("nkd,nd->nk", data.F, beta) - data.W @ gamma
        z = linalg.solve_triangular(ch, (beta - mu).T, lower=True)
        logdet = 2.0 * float(np.sum(np.log(np.diag(ch))))
        lp = -0.5 * n * k * (LOG_2PI + math.log(nu)) - 0.5 * float(np.sum(r * r)) / nu
        lp += -0.5 * n * (d * LOG_2PI + logdet) - 0.5 * float(np.sum(z * z))
        lp += -0.5 * float(mu @ mu) / data.kappa_mu - 0.5 * float(gamma @ gamma) / data.kappa_gamma
        lp += InverseWishart(d + 1, np.eye(d)).logpdf(sigma)
        lp += InverseGamma(data.eps / 2, data.eps / 2).logpdf(nu)
        return lp

    # -- traces

    def trace_vector(self, state):
        v = state.values
        s = np.asarray(v[self.SIGMA])
        iu = np.triu_indices(s.shape[0])
        return np.concatenate([v[self.MU], v[self.GAMMA], [float(v[self.NU])], s[iu]])

    def trace_names(self):
        d, k = self.data.d, self.data.k
        return ([f"mu{j}" for j in range(d)] + [f"gamma{j}" for j in range(k)] + ["nu"]
                + [f"Sigma{a}{b}" for a in range(d) for b in range(a, d)])


def _chol(m, what):
    try:
        return linalg.cholesky(m, lower=True)
    except linalg.LinAlgError as exc:
        raise ConditionalError(f"{what} precision is not positive definite") from exc


# ---------------------------------------------------------------------------
# Function-style entry points


def sample_beta_i(model: MixedTarget, state: ParameterState, i: int, rng) -> tuple:
    desc = model.beta_descriptor(state.values, i)
    return desc.sample(rng), desc


def sample_top_level(model: MixedTarget, state: ParameterState, which: str, rng):
    desc = model.top_descriptor(state.values, state.aux, which)
    return desc.sample(rng), desc


def exchangeable_acceptance(model: MixedTarget, state: ParameterState, msg: UpdateMessage,
                            old: str = "receiver") -> float:
    """MH acceptance of a received ``beta_j`` using data point ``j`` only.

    Every factor of the joint except user ``j``'s cancels.  ``old="receiver"``
    takes the receiver's current ``beta_j`` as the value being replaced;
    ``old="message"`` uses the value the sender replaced.
    """
    j = msg.data_ref if msg.data_ref is not None else msg.coord
    if not 0 <= j < model.n_users or msg.coord != j:
        raise IndexError(f"message does not refer to a user coordinate ({msg.coord}, {msg.data_ref})")
    cur = state.values[j] if old == "receiver" else msg.old_value
    if np.shape(msg.new_value) != np.shape(cur):
        raise ValueError("beta shape mismatch")
    logr = (model.user_log_density(state.values, j, msg.new_value) - model.user_log_density(state.values, j, cur)
            + msg.proposal.logpdf(cur) - msg.proposal.logpdf(msg.new_value))
    return 1.0 if logr >= 0 else math.exp(logr)


__all__ = [
    "MixedModelData",
    "MixedState",
    "MixedTarget",
    "StatCache",
    "cache_update",
    "exchangeable_acceptance",
    "generate_mixed_data",
    "read_jsonl",
    "sample_beta_i",
    "sample_top_level",
    "write_jsonl",
]
