"""
Run diagnostics: a reservoir of would-be MH acceptance probabilities,
streaming moments, sample autocorrelation and a divergence monitor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

N_BINS = 20


class Reservoir:
    """Uniform fixed-size sample of a stream (Vitter's algorithm R).

    Each item is a ``(value, worker, coord)`` triple.
    """

    def __init__(self, capacity: int = 10_000, rng: Optional[np.random.Generator] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.values: list = []
        self.tags: list = []
        self.seen = 0

    def add(self, value: float, worker: int = -1, coord: int = -1) -> None:
        self.seen += 1
        if len(self.values) < self.capacity:
            self.values.append(value)
            self.tags.append((worker, coord))
            return
        j = int(self.rng.integers(self.seen))
        if j < self.capacity:
            self.values[j] = value
            self.tags[j] = (worker, coord)

    def merge(self, other: "Reservoir") -> "Reservoir":
        """Uniform sample of the union of both streams, at this reservoir's capacity."""
        out = Reservoir(self.capacity, self.rng)
        out.seen = self.seen + other.seen
        if len(self.values) + len(other.values) <= self.capacity:
            out.values = self.values + other.values
            out.tags = self.tags + other.tags
            return out
        # a uniform sample of the union takes a hypergeometric share from each stream
        n_a = int(self.rng.hypergeometric(self.seen, other.seen, self.capacity))
        pick_a = np.sort(self.rng.choice(len(self.values), size=n_a, replace=False))
        pick_b = np.sort(self.rng.choice(len(other.values), size=self.capacity - n_a, replace=False))
        out.values = [self.values[k] for k in pick_a] + [other.values[k] for k in pick_b]
        out.tags = [self.tags[k] for k in pick_a] + [other.tags[k] for k in pick_b]
        return out

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def __len__(self):
        return len(self.values)


class OnlineMoments:
    """Streaming mean and covariance (Welford), one vector per update.

    Above ``FULL_COV_MAX_DIM`` coordinates only the variances are kept.
    """

    FULL_COV_MAX_DIM = 64

    def __init__(self, dim: int, full: Optional[bool] = None):
        self.n = 0
        self.full = dim <= self.FULL_COV_MAX_DIM if full is None else full
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim) if self.full else dim)

    def add(self, x) -> None:
        x = np.asarray(x, dtype=float)
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        if self.full:
            self.m2 += np.outer(delta, x - self.mean)
        else:
            self.m2 += delta * (x - self.mean)

    def merge(self, other: "OnlineMoments") -> "OnlineMoments":
        out = OnlineMoments(self.mean.size, self.full and other.full)
        n = self.n + other.n
        if n == 0:
            return out
        delta = other.mean - self.mean
        out.n = n
        out.mean = self.mean + delta * (other.n / n)
        d2 = np.outer(delta, delta) if out.full else delta * delta
        a, b = (self.m2, other.m2) if out.full else (_diag(self.m2), _diag(other.m2))
        out.m2 = a + b + d2 * (self.n * other.n / n)
        return out

    @property
    def var(self) -> np.ndarray:
        if self.n < 2:
            raise ValueError("need at least two observations")
        return _diag(self.m2) / (self.n - 1)

    @property
    def cov(self) -> np.ndarray:
        if self.n < 2:
            raise ValueError("need at least two observations")
        if not self.full:
            raise ValueError("only variances were accumulated for this dimension")
        return self.m2 / (self.n - 1)


def _diag(m2: np.ndarray) -> np.ndarray:
    return np.diag(m2) if m2.ndim == 2 else m2


@dataclass
class DiagnosticsRecord:
    """Everything recorded about one run (or one worker before merging)."""

    mh_ratios: Reservoir = field(default_factory=Reservoir)
    traces: dict = field(default_factory=dict)
    moments: Optional[OnlineMoments] = None
    divergence_step: Optional[int] = None
    cache_drift: float = 0.0

    @property
    def divergence_flag(self) -> bool:
        return self.divergence_step is not None


def histogram(values, n_bins: int = N_BINS) -> tuple:
    """Counts on ``n_bins`` equal bins of ``[0, 1]`` (last bin closed) and the bin edges."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    counts, _ = np.histogram(np.clip(np.asarray(values, dtype=float), 0.0, 1.0), bins=edges)
    return counts, edges


def diagnostic_a_summary(record, threshold: float = 0.5) -> tuple:
    """Fraction of recorded acceptance probabilities below ``threshold`` and their 20-bin histogram.

    The approximate sampler is trustworthy when this distribution sits near 1.
    """
    res = record.mh_ratios if isinstance(record, DiagnosticsRecord) else record
    values = res.array() if isinstance(res, Reservoir) else np.asarray(res, dtype=float)
    if values.size == 0:
        raise ValueError("no acceptance probabilities were recorded; raise diag_sample_prob")
    frac = float(np.mean(values < threshold))
    counts, edges = histogram(values)
    return frac, (counts, edges)


def rejection_probability(values) -> float:
    """Mean of ``1 - alpha``: chance a random transmitted update would be rejected."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty acceptance sample")
    return float(np.mean(1.0 - v))


def acf(trace, max_lag: Optional[int] = None) -> np.ndarray:
    """Sample autocorrelation with the biased (1/n) normalization; ``acf[0] == 1``."""
    x = np.asarray(trace, dtype=float)
    n = x.size
    if max_lag is None:
        max_lag = min(5000, n // 4)
    if n <= max_lag:
        raise ValueError(f"trace length {n} must exceed max_lag {max_lag}")
    z = x - x.mean()
    var = float(z @ z)
    if var == 0.0:
        raise ValueError("constant trace has no autocorrelation")
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(z, nfft)
    r = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1]
    out = r / var
    out[0] = 1.0
    return out


def divergence_monitor(stream: Iterable, bound: float) -> Optional[int]:
    """Index of the first item whose largest magnitude reaches ``bound``, or None.

    Items are scalars or arrays; the first item is index 0.
    """
    for k, x in enumerate(stream):
        if np.max(np.abs(x)) >= bound:
            return k
    return None


def batch_means_se(x, n_batches: int = 50) -> np.ndarray:
    """Monte Carlo standard error of the mean of each column by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0] // n_batches * n_batches
    if n < n_batches * 2:
        raise ValueError("trace too short for batch means")
    means = x[-n:].reshape(n_batches, -1, x.shape[1]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def relative_drift(cached, scratch) -> float:
    """``|cached - scratch| / max(|scratch|, tiny)`` in the Frobenius norm."""
    c = np.asarray(cached, dtype=float)
    s = np.asarray(scratch, dtype=float)
    return float(np.linalg.norm(c - s) / max(np.linalg.norm(s), 1e-300))
