"""
The asynchronous Gibbs protocol.

Every worker repeatedly selects one of its coordinates at random, samples it
from the full conditional given the values it currently knows, broadcasts
the draw, and then processes every update waiting in its inbox.  Received
updates are either accepted outright (approximate mode) or accepted with a
Metropolis-Hastings probability that treats the sender's full conditional as
the proposal (exact mode).

Two transports drive the workers: a deterministic discrete-event simulator
with message drops and latency, and real threads joined by FIFO queues.
"""

from __future__ import annotations

import heapq
import logging
import math
import queue
import threading
import time
import traceback
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .core import (
    ParameterState,
    SupportError,
    TargetModel,
    UpdateMessage,
    log_joint_ratio,
    proposal_log_density,
    worker_rng,
)
from .diagnostics import DiagnosticsRecord, OnlineMoments, Reservoir, batch_means_se
from .gaussian import jacobi_step  # noqa: F401  (part of the engine surface)

log = logging.getLogger(__name__)

EXACT = "exact"
APPROXIMATE = "approximate"


class Outcome(Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    STALE = "stale"


class ConfigError(ValueError):
    """Invalid worker topology or network/run configuration."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class WorkerError(RuntimeError):
    """A model operation failed inside a worker."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class WorkerConfig:
    """Coordinates a worker owns (and transmits) or samples locally, and how it treats updates."""

    worker_id: int
    owned_coords: Sequence[int]
    local_coords: Sequence[int] = ()
    selection_probs: Optional[dict] = None
    mode: str = APPROXIMATE
    diag_sample_prob: float = 0.0

    def __post_init__(self):
        self.owned_coords = tuple(int(c) for c in self.owned_coords)
        self.local_coords = tuple(int(c) for c in self.local_coords)
        if self.selection_probs is None:
            k = len(self.coords)
            self.selection_probs = {c: 1.0 / k for c in self.coords} if k else {}

    @property
    def coords(self) -> tuple:
        return self.owned_coords + self.local_coords


@dataclass
class NetworkConfig:
    """Per-link delivery probability and latency law (in virtual time units).

    ``latency`` is one of ``("constant", d)``, ``("uniform", a, b)`` or
    ``("geometric", p)``; the geometric law counts trials until success,
    so its minimum is 1.
    """

    transmit_prob: float = 1.0
    latency: tuple = ("constant", 0.0)
    fifo_per_link: bool = False

    def __post_init__(self):
        self.latency = tuple(self.latency)
        if not 0.0 < self.transmit_prob <= 1.0:
            raise ConfigError("network.transmit_prob", f"must lie in (0, 1], got {self.transmit_prob}")
        kind = self.latency[0]
        if kind == "constant":
            ok = len(self.latency) == 2 and self.latency[1] >= 0
        elif kind == "uniform":
            ok = len(self.latency) == 3 and 0 <= self.latency[1] <= self.latency[2]
        elif kind == "geometric":
            ok = len(self.latency) == 2 and 0 < self.latency[1] <= 1
        else:
            ok = False
        if not ok:
            raise ConfigError("network.latency", f"invalid latency law {self.latency!r}")

    @property
    def min_latency(self) -> float:
        kind = self.latency[0]
        return {"constant": self.latency[1], "uniform": self.latency[1], "geometric": 1.0}[kind]

    def sample_latency(self, rng: np.random.Generator) -> float:
        kind = self.latency[0]
        if kind == "constant":
            return float(self.latency[1])
        if kind == "uniform":
            return float(rng.uniform(self.latency[1], self.latency[2]))
        return float(rng.geometric(self.latency[1]))


def validate_topology(model: TargetModel, workers: Sequence[WorkerConfig], allow_shared: bool = False) -> None:
    """Reject configurations that break coverage, ownership or selection rules."""
    if not workers:
        raise ConfigError("topology.workers", "at least one worker is required")
    ids = [w.worker_id for w in workers]
    if sorted(ids) != list(range(len(workers))):
        raise ConfigError("topology.workers", f"worker ids must be 0..{len(workers) - 1}, got {ids}")
    transmitted = set(model.transmitted_coords)
    local = set(model.local_coords)
    owners: dict = {}
    for w in workers:
        f = f"topology.worker{w.worker_id}"
        if w.mode not in (EXACT, APPROXIMATE):
            raise ConfigError(f"{f}.mode", f"unknown mode {w.mode!r}")
        if not 0.0 <= w.diag_sample_prob <= 1.0:
            raise ConfigError(f"{f}.diag_sample_prob", "must lie in [0, 1]")
        if set(w.local_coords) != local:
            raise ConfigError(f"{f}.local_coords", "every worker samples all top-level coordinates locally")
        bad = set(w.owned_coords) - transmitted
        if bad:
            raise ConfigError(f"{f}.owned_coords", f"not transmittable coordinates: {sorted(bad)}")
        if len(set(w.owned_coords)) != len(w.owned_coords):
            raise ConfigError(f"{f}.owned_coords", "duplicate coordinates")
        for c in w.owned_coords:
            owners.setdefault(c, []).append(w.worker_id)
        probs = w.selection_probs
        if set(probs) != set(w.coords):
            raise ConfigError(f"{f}.selection_probs", "keys must equal owned plus local coordinates")
        p = np.array([probs[c] for c in w.coords], dtype=float)
        if p.size and (np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9):
            raise ConfigError(f"{f}.selection_probs", "probabilities must be positive and sum to 1")
        if not w.coords:
            raise ConfigError(f"{f}.owned_coords", "worker has nothing to sample")
    missing = transmitted - set(owners)
    if missing:
        raise ConfigError("topology.ownership", f"coordinates without an owner: {sorted(missing)[:10]}")
    shared = [c for c, o in owners.items() if len(o) > 1]
    if shared and not allow_shared:
        raise ConfigError("topology.ownership", f"coordinates owned by several workers: {sorted(shared)[:10]}")


def partition_coords(coords: Sequence[int], n_workers: int) -> list:
    """Split ``coords`` into ``n_workers`` contiguous, nearly equal groups."""
    coords = list(coords)
    return [list(a) for a in np.array_split(np.asarray(coords, dtype=int), n_workers)]


def selection_probs(owned: Sequence[int], local: Sequence[int], local_share: Optional[float] = None) -> dict:
    """Uniform over owned and local coordinates, or ``local_share`` split evenly over the local ones."""
    if local_share is None or not local or not owned:
        k = len(owned) + len(local)
        return {c: 1.0 / k for c in tuple(owned) + tuple(local)}
    if not 0.0 < local_share < 1.0:
        raise ConfigError("topology.local_share", f"must lie in (0, 1), got {local_share}")
    out = {c: (1.0 - local_share) / len(owned) for c in owned}
    out.update({c: local_share / len(local) for c in local})
    return out


def make_workers(model: TargetModel, n_workers: int, mode: str = APPROXIMATE, diag_sample_prob: float = 0.0,
                 ownership: Optional[Sequence[Sequence[int]]] = None, local_share: Optional[float] = None) -> list:
    """Workers with contiguous ownership (unless given) and uniform selection unless ``local_share`` is set."""
    groups = ownership if ownership is not None else partition_coords(model.transmitted_coords, n_workers)
    return [WorkerConfig(i, g, model.local_coords, selection_probs(g, model.local_coords, local_share),
                         mode=mode, diag_sample_prob=diag_sample_prob)
            for i, g in enumerate(groups)]


# ---------------------------------------------------------------------------
# Acceptance


def exact_acceptance_prob(model: TargetModel, state: ParameterState, msg: UpdateMessage) -> float:
    """MH probability of moving the receiver's coordinate to ``msg.new_value``.

    The proposal density is the sender's full conditional; its value at the
    receiver's current coordinate enters the numerator.
    """
    c = msg.coord
    current = state.values[c]
    q_new = proposal_log_density(msg.proposal, msg.new_value)
    q_cur = proposal_log_density(msg.proposal, current)
    if q_cur == -math.inf:
        return 0.0
    if q_new == -math.inf:
        return 1.0
    logr = log_joint_ratio(model, state, c, msg.new_value) + q_cur - q_new
    if math.isnan(logr):
        raise SupportError(f"undefined acceptance ratio for coordinate {c}")
    return 1.0 if logr >= 0 else math.exp(logr)


# ---------------------------------------------------------------------------
# Workers


class Worker:
    """One worker: its configuration, private state, generator and inbox."""

    def __init__(self, config: WorkerConfig, model: TargetModel, peers: Sequence[int], state: ParameterState,
                 rng: np.random.Generator, reservoir: Reservoir, burn_in: int = 0, thin: int = 1,
                 record: bool = True, inbox_soft_limit: int = 100_000, divergence_bound: Optional[float] = None):
        self.config = config
        self.id = config.worker_id
        self.model = model
        self.peers = tuple(peers)
        self.state = state
        self.rng = rng
        self.inbox: deque = deque()
        self.transmitted = frozenset(model.transmitted_coords)
        self._coords = np.asarray(config.coords, dtype=int)
        self._cum = np.cumsum([config.selection_probs[c] for c in config.coords])
        self._cum[-1] = 1.0
        self.sent_clock: dict = {}
        self.last_applied: dict = {}
        self.reservoir = reservoir
        self.burn_in = burn_in
        self.thin = max(1, int(thin))
        self.record = record
        self.trace: list = []
        self.moments: Optional[OnlineMoments] = None
        self.inbox_soft_limit = inbox_soft_limit
        self._warned = False
        self.divergence_bound = divergence_bound
        self.divergence_step: Optional[int] = None
        self.steps = 0
        self.counts = {"accepted": 0, "rejected": 0, "stale": 0, "broadcasts": 0}
        self.alpha_sum = 0.0
        self.alpha_n = 0

    def select(self) -> int:
        u = self.rng.random()
        return int(self._coords[min(int(np.searchsorted(self._cum, u, side="right")), self._coords.size - 1)])

    def step(self, drain: bool = True) -> list:
        """Select, sample, update locally, and (after broadcasting) drain the inbox.

        Returns the outgoing messages, one per peer, in peer order.
        """
        c = self.select()
        st = self.state
        old = st.values[c]
        try:
            value, desc = self.model.sample_conditional(st, c, self.rng)
        except Exception as exc:
            raise WorkerError(f"worker {self.id}, coordinate {c}: {exc}") from exc
        self.model.assign(st, c, value)
        out = []
        if c in self.transmitted and self.peers:
            clock = self.sent_clock.get(c, 0) + 1
            self.sent_clock[c] = clock
            st.version[c] = (self.id, clock)
            msg = UpdateMessage(c, value, old, desc, self.id, clock, self.model.data_ref(c))
            out = [msg] * len(self.peers)
            self.counts["broadcasts"] += 1
        if drain:
            self.drain()
        self.steps += 1
        self._after_step()
        return out

    def drain(self) -> None:
        if len(self.inbox) > self.inbox_soft_limit and not self._warned:
            log.warning("worker %d inbox holds %d messages", self.id, len(self.inbox))
            self._warned = True
        while self.inbox:
            self.process(self.inbox.popleft())

    def process(self, msg: UpdateMessage) -> Outcome:
        c = msg.coord
        st = self.state
        if np.shape(msg.new_value) != np.shape(st.values[c]):
            raise WorkerError(f"worker {self.id}: shape mismatch for coordinate {c}")
        key = (msg.sender, c)
        if msg.clock <= self.last_applied.get(key, 0):
            self.counts["stale"] += 1
            return Outcome.STALE
        self.last_applied[key] = msg.clock
        cfg = self.config
        exact = cfg.mode == EXACT
        p = cfg.diag_sample_prob
        keep = p > 0 and self.rng.random() < p
        alpha = None
        if exact or keep:
            try:
                alpha = exact_acceptance_prob(self.model, st, msg)
            except Exception as exc:
                raise WorkerError(f"worker {self.id}, update of coordinate {c} from {msg.sender}: {exc}") from exc
            if keep:
                self.reservoir.add(alpha, self.id, c)
        if exact:
            self.alpha_sum += alpha
            self.alpha_n += 1
            if not self.rng.random() < alpha:
                self.counts["rejected"] += 1
                return Outcome.REJECTED
        self.model.assign(st, c, msg.new_value)
        st.version[c] = (msg.sender, msg.clock)
        self.counts["accepted"] += 1
        return Outcome.ACCEPTED

    def _after_step(self) -> None:
        if self.divergence_bound is not None and self.divergence_step is None:
            v = self.model.trace_vector(self.state)
            if not np.all(np.abs(v) < self.divergence_bound):
                self.divergence_step = self.steps
        if not self.record or self.steps <= self.burn_in or (self.steps - self.burn_in) % self.thin:
            return
        v = self.model.trace_vector(self.state)
        self.trace.append(v)
        if self.moments is None:
            self.moments = OnlineMoments(v.size)
        self.moments.add(v)


def worker_step(worker: Worker, model: Optional[TargetModel] = None, rng=None) -> list:
    """One protocol step of ``worker``; the worker carries its own model and generator."""
    if model is not None and model is not worker.model:
        raise ValueError("worker is bound to a different model")
    if rng is not None:
        worker.rng = rng
    return worker.step()


def process_update(worker: Worker, model: Optional[TargetModel], msg: UpdateMessage, rng=None) -> Outcome:
    if rng is not None:
        worker.rng = rng
    return worker.process(msg)


# ---------------------------------------------------------------------------
# Results


@dataclass
class RunResult:
    traces: list
    final_states: list
    diagnostics: DiagnosticsRecord
    counters: dict
    trace_names: list
    worker_moments: list = field(default_factory=list)

    def pooled_trace(self) -> np.ndarray:
        return np.concatenate([t for t in self.traces if len(t)], axis=0)

    def worker_summary(self, w: int) -> dict:
        t = self.traces[w]
        return {"mean": t.mean(axis=0), "cov": np.cov(t, rowvar=False), "se": batch_means_se(t)}


def _mk_workers(model, workers, seed, burn_in, thin, record, reservoir_capacity, divergence_bound,
                initial_values=None):
    validate_topology(model, workers, allow_shared=getattr(model, "allow_shared", False))
    ids = [w.worker_id for w in sorted(workers, key=lambda w: w.worker_id)]
    out = []
    for w in sorted(workers, key=lambda w: w.worker_id):
        res_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), w.worker_id, 1])))
        st = model.new_state(initial_values)
        out.append(Worker(w, model, [i for i in ids if i != w.worker_id], st, worker_rng(seed, w.worker_id),
                          Reservoir(reservoir_capacity, res_rng), burn_in, thin, record,
                          divergence_bound=divergence_bound))
    return out


def _collect(workers_: Sequence[Worker], model, links: dict, reservoir_capacity: int, seed: int) -> RunResult:
    names = model.trace_names()
    traces = [np.asarray(w.trace) if w.trace else np.empty((0, len(names))) for w in workers_]
    res = Reservoir(reservoir_capacity, np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7]))))
    mom = None
    for w in workers_:
        res = res.merge(w.reservoir)
        if w.moments is not None:
            mom = w.moments if mom is None else mom.merge(w.moments)
    div = [w.divergence_step for w in workers_ if w.divergence_step is not None]
    rec = DiagnosticsRecord(mh_ratios=res, traces={w.id: traces[w.id] for w in workers_}, moments=mom,
                            divergence_step=min(div) if div else None,
                            cache_drift=max(getattr(w.state.aux, "max_drift", 0.0) for w in workers_))
    counters = {
        "steps": [w.steps for w in workers_],
        "messages_sent": sum(v["sent"] for v in links.values()),
        "messages_delivered": sum(v["delivered"] for v in links.values()),
        "messages_dropped": sum(v["dropped"] for v in links.values()),
        "broadcasts": sum(w.counts["broadcasts"] for w in workers_),
        "accepted": sum(w.counts["accepted"] for w in workers_),
        "rejected": sum(w.counts["rejected"] for w in workers_),
        "stale": sum(w.counts["stale"] for w in workers_),
        "alpha_mean": (sum(w.alpha_sum for w in workers_) / n if (n := sum(w.alpha_n for w in workers_)) else None),
        "links": {f"{s}->{r}": dict(v) for (s, r), v in sorted(links.items())},
    }
    return RunResult(traces, [w.state for w in workers_], rec, counters, names,
                     [w.moments for w in workers_])


# ---------------------------------------------------------------------------
# Simulated transport

_DELIVER, _STEP = 0, 1


def run_simulated(model: TargetModel, workers: Sequence[WorkerConfig], net: Optional[NetworkConfig] = None,
                  schedule="exponential", seed: int = 0, n_steps: int = 1000, burn_in: Optional[int] = None,
                  thin: int = 1, drain: str = "after_sample", rate: float = 1.0, record: bool = True,
                  reservoir_capacity: int = 10_000, divergence_bound: Optional[float] = None,
                  initial_values=None) -> RunResult:
    """Event-driven run; bit-for-bit reproducible for a given seed.

    Parameters
    ----------
    schedule : {"exponential", "round_robin", "synchronous"}
        When workers step in virtual time: i.i.d. exponential gaps at
        ``rate``; worker ``w`` at ``k + w / m``; or every worker at each
        integer ``k`` (ties in worker order).
    drain : {"after_sample", "on_delivery"}
        Process the inbox after each local sample, or apply each message
        the moment it is delivered.
    burn_in : int, optional
        Steps per worker excluded from traces; 10% of ``n_steps`` by default.
    """
    net = net or NetworkConfig()
    if drain not in ("after_sample", "on_delivery"):
        raise ConfigError("run.drain", f"unknown drain policy {drain!r}")
    if schedule not in ("exponential", "round_robin", "synchronous"):
        raise ConfigError("run.schedule", f"unknown schedule {schedule!r}")
    if burn_in is None:
        burn_in = n_steps // 10
    ws = _mk_workers(model, workers, seed, burn_in, thin, record, reservoir_capacity, divergence_bound,
                     initial_values)
    m = len(ws)
    sim_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x5EED])))
    links = {(w.id, r): {"sent": 0, "delivered": 0, "dropped": 0} for w in ws for r in w.peers}
    last_delivery = {k: 0.0 for k in links}
    heap: list = []
    seq = 0

    def next_time(wid: int, t: float, k: int) -> float:
        if schedule == "exponential":
            return t + float(sim_rng.exponential(1.0 / rate))
        if schedule == "round_robin":
            return k + wid / m
        return float(k)

    for w in ws:
        heapq.heappush(heap, (next_time(w.id, 0.0, 0), _STEP, w.id, 0, seq, None))
        seq += 1
    after = drain == "after_sample"
    while heap:
        t, kind, wid, _clock, _s, payload = heapq.heappop(heap)
        w = ws[wid]
        if kind == _STEP:
            msgs = w.step(drain=after)
            for r, msg in zip(w.peers, msgs):
                link = links[(wid, r)]
                link["sent"] += 1
                if net.transmit_prob < 1.0 and not sim_rng.random() < net.transmit_prob:
                    link["dropped"] += 1
                    continue
                td = t + net.sample_latency(sim_rng)
                if net.fifo_per_link:
                    td = max(td, last_delivery[(wid, r)])
                    last_delivery[(wid, r)] = td
                heapq.heappush(heap, (td, _DELIVER, r, msg.clock, seq, (wid, msg)))
                seq += 1
            if w.steps < n_steps:
                heapq.heappush(heap, (next_time(wid, t, w.steps), _STEP, wid, 0, seq, None))
                seq += 1
        else:
            sender, msg = payload
            links[(sender, wid)]["delivered"] += 1
            if after:
                w.inbox.append(msg)
            else:
                w.process(msg)
    return _collect(ws, model, links, reservoir_capacity, seed)


# ---------------------------------------------------------------------------
# Threaded transport


def run_threaded(model: TargetModel, workers: Sequence[WorkerConfig], seed: int = 0, n_steps: int = 1000,
                 wall_clock_limit: Optional[float] = None, net: Optional[NetworkConfig] = None,
                 burn_in: Optional[int] = None, thin: int = 1, record: bool = True,
                 reservoir_capacity: int = 10_000, initial_values=None) -> RunResult:
    """One thread per worker exchanging immutable messages through unbounded FIFO queues.

    Statistically equivalent to :func:`run_simulated` but not reproducible
    bit for bit.  Latency is whatever the scheduler produces; only
    ``net.transmit_prob`` is honoured.
    """
    net = net or NetworkConfig()
    if burn_in is None:
        burn_in = n_steps // 10
    ws = _mk_workers(model, workers, seed, burn_in, thin, record, reservoir_capacity, None, initial_values)
    queues = {w.id: queue.SimpleQueue() for w in ws}
    links = {(w.id, r): {"sent": 0, "delivered": 0, "dropped": 0} for w in ws for r in w.peers}
    stop = threading.Event()
    errors: list = []
    deadline = None if wall_clock_limit is None else time.monotonic() + wall_clock_limit

    def loop(w: Worker):
        net_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), w.id, 2])))
        mine = queues[w.id]
        try:
            while w.steps < n_steps and not stop.is_set():
                if deadline is not None and time.monotonic() > deadline:
                    break
                msgs = w.step(drain=False)
                for r, msg in zip(w.peers, msgs):
                    link = links[(w.id, r)]
                    link["sent"] += 1
                    if net.transmit_prob < 1.0 and not net_rng.random() < net.transmit_prob:
                        link["dropped"] += 1
                        continue
                    queues[r].put(msg)
                    link["delivered"] += 1
                while True:
                    try:
                        w.inbox.append(mine.get_nowait())
                    except queue.Empty:
                        break
                w.drain()
        except BaseException as exc:  # noqa: BLE001
            errors.append((w.id, exc, traceback.format_exc()))
            stop.set()

    threads = [threading.Thread(target=loop, args=(w,), name=f"worker-{w.id}", daemon=True) for w in ws]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        wid, exc, tb = errors[0]
        raise WorkerError(f"worker {wid} aborted the run: {exc}\n{tb}") from exc
    return _collect(ws, model, links, reservoir_capacity, seed)


# ---------------------------------------------------------------------------
# Reference samplers


def random_scan_gibbs(model: TargetModel, n_steps: int, seed: int = 0, probs: Optional[dict] = None,
                      burn_in: Optional[int] = None, initial_values=None) -> np.ndarray:
    """Plain single-chain random-scan Gibbs; returns the post-burn-in trace."""
    rng = np.random.default_rng(seed)
    coords = list(range(model.n_coords))
    p = np.full(len(coords), 1.0 / len(coords)) if probs is None else np.array([probs[c] for c in coords])
    st = model.new_state(initial_values)
    burn_in = n_steps // 10 if burn_in is None else burn_in
    picks = rng.choice(len(coords), size=n_steps, p=p)
    out = []
    for k, c in enumerate(picks):
        v, _ = model.sample_conditional(st, int(c), rng)
        model.assign(st, int(c), v)
        if k >= burn_in:
            out.append(model.trace_vector(st))
    return np.asarray(out)


def run_jacobi(target, x0, n_steps: int, rng: np.random.Generator, bound: Optional[float] = None) -> tuple:
    """Iterate :func:`jacobi_step`; stops early once any coordinate reaches ``bound``.

    Returns ``(trace, first_flagged_step)``.
    """
    x = np.asarray(x0, dtype=float)
    trace = [x]
    for k in range(1, n_steps + 1):
        x = jacobi_step(target, x, rng)
        trace.append(x)
        if bound is not None and not np.all(np.abs(x) < bound):
            return np.asarray(trace), k
    return np.asarray(trace), None
