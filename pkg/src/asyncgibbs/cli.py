"""Command-line experiment runner: ``run``, ``validate``, ``plot-data`` and ``list``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, ExperimentConfig, canned_configs, load_config, validate
from .diagnostics import batch_means_se, diagnostic_a_summary, histogram, rejection_probability
from .engine import WorkerError, run_simulated, run_threaded
from .gaussian import GaussianTarget, relative_frobenius_error

SUMMARY = "summary.json"
PLOT_DIR = "plot_data"
MAX_COV_DIM = 64


def _clean(x):
    """JSON-safe, deterministic representation (non-finite floats become null)."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _summary_columns(cfg: ExperimentConfig, names: list) -> list:
    if cfg.family == "gp":
        return [n for n in names if not n.startswith("theta")]
    return list(names)


def _se(t: np.ndarray):
    try:
        return batch_means_se(t)
    except ValueError:
        return np.full(t.shape[1], np.nan)


def summarize(cfg: ExperimentConfig, model, result, extra) -> dict:
    names = result.trace_names
    cols = _summary_columns(cfg, names)
    idx = [names.index(c) for c in cols]
    workers = []
    for w, t in enumerate(result.traces):
        entry = {"worker": w, "n_samples": int(len(t))}
        if len(t):
            tt = t[:, idx]
            entry["mean"] = tt.mean(axis=0)
            entry["se"] = _se(tt)
            if len(cols) <= MAX_COV_DIM and len(t) > 1:
                entry["cov"] = np.cov(tt, rowvar=False).reshape(len(cols), len(cols))
        workers.append(entry)
    out = {
        "name": cfg.name,
        "family": cfg.family,
        "config": cfg.raw,
        "columns": cols,
        "counters": result.counters,
        "workers": workers,
        "divergence_step": result.diagnostics.divergence_step,
        "cache_drift": result.diagnostics.cache_drift,
    }
    pooled = result.pooled_trace()[:, idx] if any(len(t) for t in result.traces) else np.empty((0, len(cols)))
    if len(pooled) > 1:
        out["pooled"] = {"mean": pooled.mean(axis=0)}
        if len(cols) <= MAX_COV_DIM:
            out["pooled"]["cov"] = np.cov(pooled, rowvar=False).reshape(len(cols), len(cols))
    res = result.diagnostics.mh_ratios
    if len(res):
        frac, (counts, edges) = diagnostic_a_summary(result.diagnostics)
        out["diagnostic_a"] = {"n_recorded": len(res), "n_seen": res.seen, "fraction_below_0.5": frac,
                               "rejection_probability": rejection_probability(res.array()),
                               "histogram": {"edges": edges, "counts": counts}}
    else:
        out["diagnostic_a"] = None
    out["reference"] = _reference(cfg, model, result, extra, pooled)
    return _clean(out)


def _reference(cfg, model, result, extra, pooled) -> dict:
    if isinstance(model, GaussianTarget):
        cov = model.covariance
        ref = {"analytic_cov": cov, "cov_rel_error": [], "max_abs_z": []}
        for t in result.traces:
            if len(t) > 1:
                ref["cov_rel_error"].append(relative_frobenius_error(np.cov(t, rowvar=False), cov))
                ref["max_abs_z"].append(float(np.max(np.abs(t.mean(axis=0) - model.mean) / _se(t))))
        if len(pooled) > 1:
            ref["pooled_cov_rel_error"] = relative_frobenius_error(np.cov(pooled, rowvar=False), cov)
        return ref
    if cfg.family == "mixed":
        truth = extra["data"].truth
        return {"truth": {k: v for k, v in truth.items() if k != "beta"}}
    return {}


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_experiment(cfg_or_path, output_dir: Optional[Path] = None) -> dict:
    """Run one experiment and write its artifacts; returns the summary dict."""
    cfg = cfg_or_path if isinstance(cfg_or_path, ExperimentConfig) else load_config(cfg_or_path)
    model, extra, workers = validate(cfg)
    out = Path(output_dir) if output_dir is not None else cfg.output_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError("output.directory", f"cannot write to {out}: {exc}") from None
    if cfg.transport == "simulated":
        result = run_simulated(model, workers, cfg.network, schedule=cfg.schedule, seed=cfg.seed,
                               n_steps=cfg.steps, burn_in=cfg.burn_in, thin=cfg.thin, drain=cfg.drain, rate=cfg.rate,
                               reservoir_capacity=cfg.reservoir_capacity, divergence_bound=cfg.divergence_bound)
    else:
        result = run_threaded(model, workers, seed=cfg.seed, n_steps=cfg.steps, net=cfg.network,
                              wall_clock_limit=cfg.wall_clock_limit, burn_in=cfg.burn_in, thin=cfg.thin,
                              reservoir_capacity=cfg.reservoir_capacity)
    summary = summarize(cfg, model, result, extra)
    (out / SUMMARY).write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")

    names = result.trace_names
    if cfg.traces:
        cols = cfg.trace_columns or _summary_columns(cfg, names)
        idx = [names.index(c) for c in cols]
        rows = ([w, k] + t[k, idx].tolist() for w, t in enumerate(result.traces) for k in range(len(t)))
        _write_csv(out / "traces.csv", ["worker", "sample"] + cols, rows)
    res = result.diagnostics.mh_ratios
    _write_csv(out / "mh_ratios.csv", ["worker", "coord", "alpha"],
               ([w, c, v] for v, (w, c) in zip(res.values, res.tags)))
    counts, edges = histogram(res.array())
    _write_csv(out / "histogram.csv", ["bin_lo", "bin_hi", "count"],
               ([float(edges[b]), float(edges[b + 1]), int(counts[b])] for b in range(len(counts))))
    if cfg.family == "gp":
        _write_gp(out, model, result, extra)
    elif cfg.family == "mixed":
        from .mixed import write_jsonl

        write_jsonl(out / "data.jsonl", extra["data"])
    return summary


def _write_gp(out: Path, model, result, extra) -> None:
    from .gp import reflected_function, write_data_csv

    x, y = extra["x"], extra["y"]
    write_data_csv(out / "data.csv", x, y)
    pooled = result.pooled_trace()
    n = model.config.n
    if len(pooled):
        theta = pooled[:, :n]
        mean, sd = theta.mean(axis=0), theta.std(axis=0, ddof=1) if len(theta) > 1 else np.zeros(n)
    else:
        mean = sd = np.full(n, np.nan)
    truth = reflected_function(x)
    _write_csv(out / "gp_fit.csv", ["x", "y", "posterior_mean", "posterior_sd", "truth"],
               ([float(a), float(b), float(c), float(d), float(e)] for a, b, c, d, e in zip(x, y, mean, sd, truth)))


# ---------------------------------------------------------------------------
# Plot data


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, list(r)


def emit_plot_data(run_dir, max_points: int = 5000) -> Path:
    """Write tidy CSVs for one run directory, or merged panels for a directory of runs."""
    root = Path(run_dir)
    if (root / SUMMARY).is_file():
        runs = [root]
    else:
        runs = sorted(p for p in root.iterdir() if (p / SUMMARY).is_file()) if root.is_dir() else []
    if not runs:
        raise FileNotFoundError(f"no {SUMMARY} in {root} or its subdirectories")
    dest = root / PLOT_DIR
    dest.mkdir(exist_ok=True)
    traces, hist, moments, overlay = [], [], [], []
    for run in runs:
        name = run.name
        summ = json.loads((run / SUMMARY).read_text())
        for w in summ["workers"]:
            for var, m, s in zip(summ["columns"], w.get("mean", []), w.get("se", [])):
                moments.append([name, w["worker"], var, m, s])
        if (run / "traces.csv").is_file():
            header, rows = _read_csv(run / "traces.csv")
            by_worker = {}
            for row in rows:
                by_worker.setdefault(row[0], []).append(row)
            for wid in sorted(by_worker, key=int):
                wr = by_worker[wid]
                keep = np.unique(np.linspace(0, len(wr) - 1, min(max_points, len(wr))).astype(int))
                for k in keep:
                    row = wr[k]
                    for var, val in zip(header[2:], row[2:]):
                        traces.append([name, row[0], row[1], var, val])
        if (run / "histogram.csv").is_file():
            _, rows = _read_csv(run / "histogram.csv")
            hist.extend([name] + r for r in rows)
        if (run / "gp_fit.csv").is_file():
            _, rows = _read_csv(run / "gp_fit.csv")
            overlay.extend([name] + r for r in rows)
    _write_csv(dest / "trace_long.csv", ["run", "worker", "sample", "variable", "value"], traces)
    _write_csv(dest / "histogram.csv", ["run", "bin_lo", "bin_hi", "count"], hist)
    _write_csv(dest / "moments.csv", ["run", "worker", "variable", "mean", "se"], moments)
    if overlay:
        _write_csv(dest / "gp_overlay.csv", ["run", "x", "y", "posterior_mean", "posterior_sd", "truth"], overlay)
    return dest


# ---------------------------------------------------------------------------
# Entry point


def _fail(code: int, **info) -> int:
    print(json.dumps(info, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="asyncgibbs", description="Asynchronous Gibbs sampling experiments")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run an experiment config (file path or canned name)")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output-dir", help="write artifacts here instead of output.directory")
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    p_plot = sub.add_parser("plot-data", help="write tidy CSVs from a run directory or a directory of runs")
    p_plot.add_argument("dir")
    p_plot.add_argument("--max-points", type=int, default=5000, help="trace points kept per worker")
    sub.add_parser("list", help="list canned configs")
    args = ap.parse_args(argv)
    try:
        if args.cmd == "list":
            print("\n".join(canned_configs()))
            return 0
        if args.cmd == "validate":
            cfg = load_config(args.config)
            _, _, workers = validate(cfg)
            print(json.dumps({"ok": True, "name": cfg.name, "family": cfg.family, "workers": len(workers)},
                             sort_keys=True))
            return 0
        if args.cmd == "run":
            cfg = load_config(args.config)
            out = Path(args.output_dir) if args.output_dir else cfg.output_dir()
            run_experiment(cfg, out)
            print(json.dumps({"ok": True, "output": str(out)}, sort_keys=True))
            return 0
        if args.cmd == "plot-data":
            dest = emit_plot_data(args.dir, args.max_points)
            print(json.dumps({"ok": True, "output": str(dest)}, sort_keys=True))
            return 0
    except ConfigError as exc:
        return _fail(2, ok=False, field=exc.field, error=str(exc))
    except FileNotFoundError as exc:
        return _fail(2, ok=False, field=None, error=str(exc))
    except WorkerError as exc:
        return _fail(1, ok=False, field=None, error=str(exc))
    return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
