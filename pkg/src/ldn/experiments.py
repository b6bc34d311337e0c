"""Spiral experiment harness: scans, speedup measurement, result records.

Each (configuration, seed) cell trains one model on a freshly generated
spiral problem and evaluates it on a held-out test set drawn with a
disjoint seed. Records capture the full configuration, the learned depth
distribution, the cutoff depth under every pruning heuristic, and test
metrics for pruned-marginal, full-marginal, and per-depth predictions, so
every number is reproducible from the record alone. Cells are independent
and may run in a process pool; divergent runs are flagged, not fatal.
"""

from __future__ import annotations

import statistics
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .autodiff import no_grad
from .data import gen_spirals, standardize
from .depth import PRUNE_HEURISTICS, make_prior, predict_marginal, prune_argmax
from .metrics import EvalReport, ReliabilityBin, evaluate_predictions
from .network import NetworkConfig, forward_all_depths, forward_truncated
from .training import DivergenceError, TrainConfig, train_ddn, train_ldn

# test sets use a seed disjoint from every train seed
TEST_SEED_OFFSET = 10_000_019

DDN_DEPTH_GRID = (0, 1, 3, 5, 7, 9, 12, 15, 20, 30, 50)


@dataclass(frozen=True)
class SpiralConfig:
    n_train: int = 200
    n_test: int = 1800
    rotation_deg: float = 720.0
    sigma: float = 0.15


@dataclass(frozen=True)
class CellSpec:
    """One trainable cell; picklable so cells can run in worker processes."""

    kind: str  # "ldn" or "ddn"
    seed: int
    data: SpiralConfig
    max_depth: int
    width: int
    gamma: float = 0.85
    ddn_depth: Optional[int] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    ece_bins: int = 10

    @property
    def experiment_id(self):
        tag = f"{self.kind}-D{self.max_depth}"
        if self.kind == "ddn":
            tag = f"ddn-d{self.ddn_depth}"
        d = self.data
        return (
            f"{tag}-w{self.width}-rot{d.rotation_deg:g}-n{d.n_train}-seed{self.seed}"
        )


@dataclass
class ExperimentRecord:
    experiment_id: str
    kind: str
    seed: int
    config: dict
    diverged: bool = False
    divergence_message: str = ""
    alpha: Optional[list] = None
    d_opt: Optional[dict] = None
    reports: Optional[dict] = None  # pruned / full EvalReport, per_depth list
    timings: Optional[dict] = None

    def to_dict(self):
        out = {
            "experiment_id": self.experiment_id,
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config,
            "diverged": self.diverged,
            "divergence_message": self.divergence_message,
            "alpha": self.alpha,
            "d_opt": self.d_opt,
            "timings": self.timings,
            "reports": None,
        }
        if self.reports is not None:
            out["reports"] = {
                "pruned": self.reports["pruned"].to_dict(),
                "full": self.reports["full"].to_dict(),
                "per_depth": [r.to_dict() for r in self.reports["per_depth"]],
            }
        return out

    @classmethod
    def from_dict(cls, d):
        reports = None
        if d.get("reports") is not None:
            reports = {
                "pruned": _report_from_dict(d["reports"]["pruned"]),
                "full": _report_from_dict(d["reports"]["full"]),
                "per_depth": [_report_from_dict(r) for r in d["reports"]["per_depth"]],
            }
        return cls(
            experiment_id=d["experiment_id"],
            kind=d["kind"],
            seed=d["seed"],
            config=d["config"],
            diverged=d["diverged"],
            divergence_message=d.get("divergence_message", ""),
            alpha=d.get("alpha"),
            d_opt=d.get("d_opt"),
            reports=reports,
            timings=d.get("timings"),
        )


def _report_from_dict(d):
    return EvalReport(
        mean_loglik=d["mean_loglik"],
        error=d["error"],
        ece=d["ece"],
        bins=[ReliabilityBin(**b) for b in d["bins"]],
    )


def make_cell_datasets(spec):
    """Standardised train/test pair for a cell, test mapped by train constants."""
    train = gen_spirals(spec.data.n_train, spec.data.rotation_deg, spec.data.sigma, spec.seed)
    test = gen_spirals(
        spec.data.n_test, spec.data.rotation_deg, spec.data.sigma, spec.seed + TEST_SEED_OFFSET
    )
    train_std, (test_std,), _ = standardize(train, [test])
    return train_std, test_std


def _cell_config(spec):
    return {
        "net": {
            "max_depth": spec.max_depth,
            "width": spec.width,
            "input_dim": 2,
            "n_classes": 2,
        },
        "train": asdict(spec.train),
        "data": asdict(spec.data),
        "prior": {"gamma": spec.gamma},
        "ddn_depth": spec.ddn_depth,
        "ece_bins": spec.ece_bins,
    }


def _median_forward_seconds(net, x, depth, passes=5):
    with no_grad():
        forward_truncated(net, x, depth, mode="eval")  # warm-up
        times = []
        for _ in range(passes):
            t0 = time.perf_counter()
            forward_truncated(net, x, depth, mode="eval")
            times.append(time.perf_counter() - t0)
    return statistics.median(times)

def run_cell(spec):
    """Train and evaluate one cell, converting divergence into a flagged record."""
    record = ExperimentRecord(
        experiment_id=spec.experiment_id,
        kind=spec.kind,
        seed=spec.seed,
        config=_cell_config(spec),
    )
    train_std, test_std = make_cell_datasets(spec)
    net_config = NetworkConfig(spec.max_depth, spec.width, 2, 2)
    train_config = replace(spec.train, seed=spec.seed)

    try:
        if spec.kind == "ldn":
            prior = make_prior(spec.max_depth, spec.gamma)
            model = train_ldn(train_std, net_config, prior, train_config)
        elif spec.kind == "ddn":
            model = train_ddn(train_std, spec.ddn_depth, net_config, train_config)
        else:
            raise ValueError(f"unknown cell kind {spec.kind!r}")
    except DivergenceError as exc:
        record.diverged = True
        record.divergence_message = str(exc)
        return record

    alpha = model.posterior.probs
    net = model.network
    with no_grad():
        trace = forward_all_depths(net, test_std.x, mode="eval", update_running=False)
    per_depth_probs = trace.prob_array()

    prunes = {name: fn(alpha) for name, fn in PRUNE_HEURISTICS.items()}
    chosen = prunes["argmax"]
    pruned_probs = predict_marginal(
        per_depth_probs[:, : chosen.d_opt + 1, :], chosen.truncated
    )
    full_probs = predict_marginal(per_depth_probs, alpha)

    record.alpha = alpha.tolist()
    record.d_opt = {name: p.d_opt for name, p in prunes.items()}
    record.reports = {
        "pruned": evaluate_predictions(pruned_probs, test_std.y, spec.ece_bins),
        "full": evaluate_predictions(full_probs, test_std.y, spec.ece_bins),
        "per_depth": [
            evaluate_predictions(per_depth_probs[:, i, :], test_std.y, spec.ece_bins)
            for i in range(per_depth_probs.shape[1])
        ],
    }
    record.timings = {
        "train_seconds": model.history.seconds_total,
        "pruned_forward_seconds": _median_forward_seconds(net, test_std.x, chosen.d_opt),
        "full_forward_seconds": _median_forward_seconds(net, test_std.x, net.config.max_depth),
    }
    return record


def _run_cells(specs, workers=1):
    if workers <= 1:
        return [run_cell(s) for s in specs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, specs))


def _ldn_specs(seeds, data, max_depth, width, gamma, train):
    return [
        CellSpec("ldn", s, data, max_depth, width, gamma, None, train) for s in seeds
    ]


def run_depth_scan(
    depth_list,
    repeats=4,
    base_seed=0,
    ddn_depths=DDN_DEPTH_GRID,
    width=20,
    data=SpiralConfig(),
    gamma=0.85,
    train=TrainConfig(),
    workers=1,
):
    """Train one model per max-depth and per fixed baseline depth, per seed."""
    seeds = [base_seed + r for r in range(repeats)]
    specs = []
    for d in depth_list:
        specs += _ldn_specs(seeds, data, d, width, gamma, train)
    for d in ddn_depths:
        specs += [
            CellSpec("ddn", s, data, d, width, gamma, ddn_depth=d, train=train)
            for s in seeds
        ]
    return _run_cells(specs, workers)


def run_width_scan(
    width_list,
    repeats=4,
    base_seed=0,
    max_depth=20,
    data=SpiralConfig(),
    gamma=0.85,
    train=TrainConfig(),
    workers=1,
):
    seeds = [base_seed + r for r in range(repeats)]
    specs = []
    for w in width_list:
        specs += _ldn_specs(seeds, data, max_depth, w, gamma, train)
    return _run_cells(specs, workers)


def run_rotation_scan(
    rotation_list,
    repeats=4,
    base_seed=0,
    max_depth=20,
    width=20,
    data=SpiralConfig(),
    gamma=0.85,
    train=TrainConfig(),
    workers=1,
):
    seeds = [base_seed + r for r in range(repeats)]
    specs = []
    for deg in rotation_list:
        cell_data = replace(data, rotation_deg=float(deg))
        specs += _ldn_specs(seeds, cell_data, max_depth, width, gamma, train)
    return _run_cells(specs, workers)


def run_ntrain_scan(
    n_list,
    repeats=4,
    base_seed=0,
    max_depth=20,
    width=20,
    data=SpiralConfig(),
    gamma=0.85,
    train=TrainConfig(),
    workers=1,
):
    seeds = [base_seed + r for r in range(repeats)]
    specs = []
    for n in n_list:
        cell_data = replace(data, n_train=int(n))
        specs += _ldn_specs(seeds, cell_data, max_depth, width, gamma, train)
    return _run_cells(specs, workers)


@dataclass(frozen=True)
class SpeedupResult:
    full_seconds: float
    truncated_seconds: float
    speedup: float  # fractional time saved, (full - truncated) / full
    passes: int
    d_opt: int
    max_depth: int


def measure_speedup(net, d_opt, x, passes=100, warmup=3):
    """Median wall-clock of truncated vs full eval-mode forwards on one batch."""
    x = np.asarray(x, dtype=np.float64)
    resolution = time.get_clock_info("perf_counter").resolution

    def run(depth):
        with no_grad():
            for _ in range(warmup):
                forward_truncated(net, x, depth, mode="eval")
            times = []
            for _ in range(passes):
                t0 = time.perf_counter()
                forward_truncated(net, x, depth, mode="eval")
                times.append(time.perf_counter() - t0)
        return statistics.median(times)

    t_trunc = run(d_opt)
    t_full = run(net.config.max_depth)
    for t in (t_trunc, t_full):
        if resolution > 0.01 * t:
            warnings.warn(
                f"timer resolution {resolution:g}s exceeds 1% of measured {t:g}s",
                RuntimeWarning,
                stacklevel=2,
            )
    return SpeedupResult(
        full_seconds=t_full,
        truncated_seconds=t_trunc,
        speedup=(t_full - t_trunc) / t_full,
        passes=passes,
        d_opt=d_opt,
        max_depth=net.config.max_depth,
    )


# -- aggregation and emission -------------------------------------------


def group_key(record):
    cfg = record.config
    depth = cfg["ddn_depth"] if record.kind == "ddn" else cfg["net"]["max_depth"]
    return (
        record.kind,
        depth,
        cfg["net"]["width"],
        cfg["data"]["rotation_deg"],
        cfg["data"]["n_train"],
    )


def summarize(records):
    """Per-configuration mean/std over seeds, divergent runs excluded but counted."""
    groups = {}
    for rec in records:
        groups.setdefault(group_key(rec), []).append(rec)
    rows = []
    for key, recs in sorted(groups.items(), key=lambda kv: str(kv[0])):
        ok = [r for r in recs if not r.diverged]
        row = {
            "kind": key[0],
            "depth": key[1],
            "width": key[2],
            "rotation_deg": key[3],
            "n_train": key[4],
            "runs": len(recs),
            "diverged": len(recs) - len(ok),
        }
        if ok:
            d_opts = [r.d_opt["argmax"] for r in ok]
            logliks = [r.reports["pruned"].mean_loglik for r in ok]
            errors = [r.reports["pruned"].error for r in ok]
            row.update(
                d_opt_mean=float(np.mean(d_opts)),
                d_opt_std=float(np.std(d_opts)),
                loglik_mean=float(np.mean(logliks)),
                loglik_std=float(np.std(logliks)),
                error_mean=float(np.mean(errors)),
                error_std=float(np.std(errors)),
            )
        rows.append(row)
    return rows


CSV_COLUMNS = [
    "experiment_id",
    "kind",
    "seed",
    "diverged",
    "max_depth",
    "ddn_depth",
    "width",
    "rotation_deg",
    "n_train",
    "gamma",
    "d_argmax",
    "d_p95",
    "d_expected",
    "pruned_loglik",
    "pruned_error",
    "pruned_ece",
    "full_loglik",
    "full_error",
    "full_ece",
    "train_seconds",
    "pruned_forward_seconds",
    "full_forward_seconds",
]


def _csv_row(rec):
    cfg = rec.config
    row = {
        "experiment_id": rec.experiment_id,
        "kind": rec.kind,
        "seed": rec.seed,
        "diverged": int(rec.diverged),
        "max_depth": cfg["net"]["max_depth"],
        "ddn_depth": "" if cfg["ddn_depth"] is None else cfg["ddn_depth"],
        "width": cfg["net"]["width"],
        "rotation_deg": cfg["data"]["rotation_deg"],
        "n_train": cfg["data"]["n_train"],
        "gamma": cfg["prior"]["gamma"],
    }
    if rec.diverged:
        for col in CSV_COLUMNS:
            row.setdefault(col, "")
    else:
        row.update(
            d_argmax=rec.d_opt["argmax"],
            d_p95=rec.d_opt["p95"],
            d_expected=rec.d_opt["expected"],
            pruned_loglik=rec.reports["pruned"].mean_loglik,
            pruned_error=rec.reports["pruned"].error,
            pruned_ece=rec.reports["pruned"].ece,
            full_loglik=rec.reports["full"].mean_loglik,
            full_error=rec.reports["full"].error,
            full_ece=rec.reports["full"].ece,
            train_seconds=rec.timings["train_seconds"],
            pruned_forward_seconds=rec.timings["pruned_forward_seconds"],
            full_forward_seconds=rec.timings["full_forward_seconds"],
        )
    return [str(row[c]) for c in CSV_COLUMNS]


def emit_results(records, path, fmt="json"):
    """Write records to ``path`` as JSON (full fidelity) or flat CSV."""
    import json
    from pathlib import Path

    path = Path(path)
    if fmt == "json":
        doc = {"records": [r.to_dict() for r in records]}
        path.write_text(json.dumps(doc, indent=2) + "\n")
    elif fmt == "csv":
        lines = [",".join(CSV_COLUMNS)]
        lines += [",".join(_csv_row(r)) for r in records]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"format must be 'json' or 'csv', got {fmt!r}")


def load_results(path):
    """Read back records written by emit_results(..., fmt='json')."""
    import json
    from pathlib import Path

    doc = json.loads(Path(path).read_text())
    return [ExperimentRecord.from_dict(d) for d in doc["records"]]
