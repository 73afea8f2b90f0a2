"""
Experiment configuration files.

Configs are INI files read with :mod:`configparser`.  Sections and keys::

    [model]     family = gaussian_exponential | gaussian_jacobi | gp | mixed, plus family parameters
    [topology]  workers, ownership (contiguous | explicit map)
    [network]   transmit_prob, latency, fifo_per_link, schedule, drain
    [run]       mode, steps, seed, burn_in, thin, diag_sample_prob, transport, ...
    [output]    directory, traces, trace_columns

See the README for every key and its default.  Unknown sections or keys are
rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .engine import APPROXIMATE, EXACT, ConfigError, NetworkConfig, make_workers, validate_topology
from .gaussian import build_exponential_target, build_jacobi_target

OUTPUT_ROOT_ENV = "ASYNCGIBBS_OUTPUT_ROOT"
FAMILIES = ("gaussian_exponential", "gaussian_jacobi", "gp", "mixed")

_MODEL_KEYS = {
    "gaussian_exponential": {"dim": int, "phi": float},
    "gaussian_jacobi": {"dim": int},
    "gp": {"n": int, "rho": float, "phi": float, "block_size": int, "band_width": int, "data_seed": int,
           "data_file": str, "a_mu": float, "b_mu": float, "a_sigma": float, "b_sigma": float, "a_tau": float,
           "b_tau": float, "noise_sd": float, "init_mu": float, "init_sigma2": float, "init_tau2": float},
    "mixed": {"n": int, "d": int, "T": int, "p": int, "data_seed": int, "data_file": str, "kappa_mu": float,
              "kappa_gamma": float, "eps": float, "audit_every": int},
}
_SECTION_KEYS = {
    "topology": {"workers": int, "ownership": str, "local_share": float},
    "network": {"transmit_prob": float, "latency": str, "fifo_per_link": bool, "schedule": str, "drain": str,
                "rate": float},
    "run": {"mode": str, "steps": int, "seed": int, "burn_in": int, "thin": int, "diag_sample_prob": float,
            "reservoir_capacity": int, "transport": str, "divergence_bound": float, "wall_clock_limit": float},
    "output": {"directory": str, "traces": bool, "trace_columns": str},
}
SCHEDULES = ("exponential", "round_robin", "synchronous")
DRAINS = ("after_sample", "on_delivery")
TRANSPORTS = ("simulated", "threaded")


@dataclass
class ExperimentConfig:
    name: str
    family: str
    model: dict
    workers: int
    ownership: Optional[list]
    local_share: Optional[float]
    network: NetworkConfig
    schedule: str = "exponential"
    drain: str = "after_sample"
    rate: float = 1.0
    mode: str = APPROXIMATE
    steps: int = 1000
    seed: int = 0
    burn_in: Optional[int] = None
    thin: int = 1
    diag_sample_prob: float = 0.0
    reservoir_capacity: int = 10_000
    transport: str = "simulated"
    divergence_bound: Optional[float] = None
    wall_clock_limit: Optional[float] = None
    directory: str = "runs"
    traces: bool = True
    trace_columns: Optional[list] = None
    source: Optional[str] = None
    raw: dict = field(default_factory=dict)

    def output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        d = Path(self.directory)
        return d if d.is_absolute() or not root else Path(root) / d


def _convert(section: str, key: str, text: str, kind):
    fld = f"{section}.{key}"
    try:
        if kind is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text.strip())
    except ValueError:
        raise ConfigError(fld, f"cannot parse {text!r} as {kind.__name__}") from None


def _parse_latency(text: str) -> tuple:
    """``constant:0``, ``uniform:0,2`` or ``geometric:0.5``."""
    kind, _, args = text.partition(":")
    try:
        vals = tuple(float(a) for a in args.split(",")) if args.strip() else ()
    except ValueError:
        raise ConfigError("network.latency", f"bad numbers in {text!r}") from None
    return (kind.strip(),) + vals


def _parse_ownership(text: str) -> Optional[list]:
    """``contiguous`` or ``0:0,1; 1:2,3`` (worker: coordinates)."""
    if text.strip().lower() in ("", "contiguous"):
        return None
    out = {}
    try:
        for part in text.split(";"):
            if not part.strip():
                continue
            w, _, cs = part.partition(":")
            out[int(w)] = [int(c) for c in cs.split(",") if c.strip()]
    except ValueError:
        raise ConfigError("topology.ownership", f"cannot parse {text!r}") from None
    if sorted(out) != list(range(len(out))):
        raise ConfigError("topology.ownership", "worker ids must be 0..m-1")
    return [out[w] for w in range(len(out))]


def parse_config(text: str, name: str = "experiment", source: Optional[str] = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc).splitlines()[0]) from None
    allowed = {"model", "topology", "network", "run", "output"}
    for sec in cp.sections():
        if sec not in allowed:
            raise ConfigError(sec, "unknown section")
    if not cp.has_section("model"):
        raise ConfigError("model", "missing section")
    family = cp.get("model", "family", fallback=None)
    if family not in FAMILIES:
        raise ConfigError("model.family", f"unknown model family {family!r}; choose from {', '.join(FAMILIES)}")
    model = {}
    for key, text_val in cp.items("model"):
        if key == "family":
            continue
        kinds = _MODEL_KEYS[family]
        if key not in kinds:
            raise ConfigError(f"model.{key}", f"unknown key for family {family}")
        model[key] = _convert("model", key, text_val, kinds[key])
    vals = {}
    for sec, kinds in _SECTION_KEYS.items():
        if not cp.has_section(sec):
            continue
        for key, text_val in cp.items(sec):
            if key not in kinds:
                raise ConfigError(f"{sec}.{key}", "unknown key")
            if key in ("latency", "ownership", "trace_columns"):
                vals[(sec, key)] = text_val.strip()
            else:
                vals[(sec, key)] = _convert(sec, key, text_val, kinds[key])
    if ("run", "seed") not in vals:
        raise ConfigError("run.seed", "a seed is required")
    g = vals.get
    net = NetworkConfig(g(("network", "transmit_prob"), 1.0),
                        _parse_latency(g(("network", "latency"), "constant:0")),
                        g(("network", "fifo_per_link"), False))
    cfg = ExperimentConfig(
        name=name, family=family, model=model,
        workers=g(("topology", "workers"), 1),
        ownership=_parse_ownership(g(("topology", "ownership"), "contiguous")),
        local_share=g(("topology", "local_share")),
        network=net,
        schedule=g(("network", "schedule"), "exponential"),
        drain=g(("network", "drain"), "after_sample"),
        rate=g(("network", "rate"), 1.0),
        mode=g(("run", "mode"), APPROXIMATE),
        steps=g(("run", "steps"), 1000),
        seed=g(("run", "seed")),
        burn_in=g(("run", "burn_in")),
        thin=g(("run", "thin"), 1),
        diag_sample_prob=g(("run", "diag_sample_prob"), 0.0),
        reservoir_capacity=g(("run", "reservoir_capacity"), 10_000),
        transport=g(("run", "transport"), "simulated"),
        divergence_bound=g(("run", "divergence_bound")),
        wall_clock_limit=g(("run", "wall_clock_limit")),
        directory=g(("output", "directory"), f"runs/{name}"),
        traces=g(("output", "traces"), True),
        trace_columns=[c.strip() for c in g(("output", "trace_columns")).split(",")]
        if g(("output", "trace_columns")) else None,
        source=source,
        raw={s: dict(cp.items(s)) for s in cp.sections()},
    )
    _check_scalars(cfg)
    return cfg


def _check_scalars(cfg: ExperimentConfig) -> None:
    checks = [
        ("topology.workers", cfg.workers >= 1, "must be at least 1"),
        ("topology.local_share", cfg.local_share is None or 0.0 < cfg.local_share < 1.0, "must lie in (0, 1)"),
        ("network.schedule", cfg.schedule in SCHEDULES, f"must be one of {', '.join(SCHEDULES)}"),
        ("network.drain", cfg.drain in DRAINS, f"must be one of {', '.join(DRAINS)}"),
        ("network.rate", cfg.rate > 0, "must be positive"),
        ("run.mode", cfg.mode in (EXACT, APPROXIMATE), "must be exact or approximate"),
        ("run.steps", cfg.steps >= 1, "must be at least 1"),
        ("run.burn_in", cfg.burn_in is None or 0 <= cfg.burn_in < cfg.steps, "must lie in [0, steps)"),
        ("run.thin", cfg.thin >= 1, "must be at least 1"),
        ("run.diag_sample_prob", 0.0 <= cfg.diag_sample_prob <= 1.0, "must lie in [0, 1]"),
        ("run.reservoir_capacity", cfg.reservoir_capacity >= 1, "must be at least 1"),
        ("run.transport", cfg.transport in TRANSPORTS, f"must be one of {', '.join(TRANSPORTS)}"),
    ]
    for fld, ok, msg in checks:
        if not ok:
            raise ConfigError(fld, msg)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        canned = canned_config_path(str(path))
        if canned is None:
            raise ConfigError("file", f"no such config file or canned config: {path}")
        p = canned
    return parse_config(p.read_text(), name=p.stem, source=str(p))


def canned_configs() -> list:
    return sorted(f.name[:-4] for f in resources.files("asyncgibbs.configs").iterdir() if f.name.endswith(".ini"))


def canned_config_path(name: str) -> Optional[Path]:
    f = resources.files("asyncgibbs.configs") / f"{name}.ini"
    return Path(str(f)) if f.is_file() else None


def build_model(cfg: ExperimentConfig):
    """Model plus whatever data it was built from (``None`` for Gaussian targets)."""
    m = cfg.model
    try:
        if cfg.family == "gaussian_exponential":
            return build_exponential_target(m.get("dim", 8), m.get("phi", 0.5)), None
        if cfg.family == "gaussian_jacobi":
            return build_jacobi_target(m.get("dim", 8)), None
        if cfg.family == "gp":
            from .gp import GpConfig, GpTarget, generate_data, read_data_csv

            gkeys = {k: v for k, v in m.items() if k not in ("data_seed", "data_file")}
            gcfg = GpConfig(**gkeys)
            if "data_file" in m:
                x, y = read_data_csv(_resolve(cfg, m["data_file"]))
                if y.size != gcfg.n:
                    raise ConfigError("model.data_file", f"holds {y.size} points, model.n is {gcfg.n}")
            else:
                x, y = generate_data(gcfg, m.get("data_seed", 0))
            return GpTarget(gcfg, y), {"x": x, "y": y, "config": gcfg}
        if cfg.family == "mixed":
            from .mixed import MixedTarget, generate_mixed_data, read_jsonl

            if "data_file" in m:
                data = read_jsonl(_resolve(cfg, m["data_file"]))
            else:
                data = generate_mixed_data(m.get("n", 1000), m.get("d", 3), m.get("T", 13), m.get("p", 1),
                                           m.get("data_seed", 0), m.get("kappa_mu", 10.0),
                                           m.get("kappa_gamma", 10.0), m.get("eps", 1.0))
            return MixedTarget(data, m.get("audit_every", 10_000)), {"data": data}
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError("model", str(exc)) from None
    raise ConfigError("model.family", f"unknown model family {cfg.family!r}")


def _resolve(cfg: ExperimentConfig, path: str) -> Path:
    p = Path(path)
    if not p.is_absolute() and cfg.source:
        p = Path(cfg.source).parent / p
    if not p.exists():
        raise ConfigError("model.data_file", f"file not found: {p}")
    return p


def build_workers(cfg: ExperimentConfig, model) -> list:
    if cfg.ownership is None:
        if cfg.workers > len(model.transmitted_coords):
            raise ConfigError("topology.workers", "more workers than transmitted coordinates")
        return make_workers(model, cfg.workers, cfg.mode, cfg.diag_sample_prob, local_share=cfg.local_share)
    if len(cfg.ownership) != cfg.workers:
        raise ConfigError("topology.ownership", f"lists {len(cfg.ownership)} workers, topology.workers is {cfg.workers}")
    ws = make_workers(model, cfg.workers, cfg.mode, cfg.diag_sample_prob, cfg.ownership, cfg.local_share)
    validate_topology(model, ws)
    return ws


def validate(cfg: ExperimentConfig):
    """Build the model and workers without running; raises :class:`ConfigError`."""
    model, extra = build_model(cfg)
    workers = build_workers(cfg, model)
    if cfg.trace_columns:
        names = set(model.trace_names())
        bad = [c for c in cfg.trace_columns if c not in names]
        if bad:
            raise ConfigError("output.trace_columns", f"unknown columns {bad[:5]}")
    return model, extra, workers
