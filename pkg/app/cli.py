"""
ConfProbe Command Line

Each command loads the flat config, applies flag overrides, runs one
pipeline stage and writes its files into output_dir through temp files
that are renamed only once everything has been computed. A one-line JSON
summary goes to stdout.
"""

import argparse
import csv
import io
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import yaml

from . import __version__
from . import activity
from . import config
from .dataset import Dataset, load_dataset, write_dataset
from .diagnostics import collect_latent_noise, diagnose, learn_transfer_cdf, default_a_grid
from .errors import (
    ProbeError, ConfigError, IngestionError, BudgetError, QueryError, ErrorCode,
    exit_code_for, format_error_message,
)
from .estimation import (
    A_GRID, FitResult, estimate_many, grid_search, assign_confidences, planned_queries, estimates_to_csv,
)
from .metrics import metrics_summary, reliability_bins, score_predictions, pearson_r
from .oracle import (
    QueryCache, SyntheticModel, SyntheticOracle, build_oracle, require_white_box,
    make_synthetic_model, sample_synthetic_dataset, fit_logit_scale,
)
from .prob_core import CalibrationModel, EmpiricalCdf
from .transforms import TransformSpec, specs_from_config, resolve_spec, DEFAULT_SPECS

REPORT_COLUMNS = ["run", "model_kind", "spec", "s", "a", "n", "acc", "ece", "auroc", "brier", "var", "ks"]
SWEEP_COLUMNS = ["family", "spec", "s", "a", "acc", "ece", "auroc", "brier"]
DIAG_STATS = ("var", "ks")
CORRELATED_METRICS = ("ece", "auroc", "brier")


# ============== Output files ==============

def dump_json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_outputs(output_dir: str, files: Dict[str, str]):
    """Write every file to a temp name first, then rename them all into place

    If any rename fails, files already placed by this call are removed and
    the previous versions restored, so the directory holds either the whole
    new set or the old one.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    staged = []
    placed = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.", suffix=".tmp")
            with os.fdopen(fd, "w", newline="") as f:
                f.write(text)
            staged.append((tmp, out / name))
        for tmp, final in staged:
            backup = None
            if final.exists():
                backup = out / f".{final.name}.bak"
                os.replace(final, backup)
            placed.append((final, backup))
            os.replace(tmp, final)
    except BaseException:
        for final, backup in reversed(placed):
            if final.exists():
                os.unlink(final)
            if backup is not None:
                os.replace(backup, final)
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise
    for _, backup in placed:
        if backup is not None:
            os.unlink(backup)


def _csv(rows: List[List], header: List[str]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return out.getvalue()


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


# ============== Shared run plumbing ==============

def check_budget(cfg: config.RunConfig, planned: int):
    """Refuse before any query when the plan exceeds the budget"""
    if cfg.budget is not None and planned > cfg.budget:
        activity.budget_refused(planned, cfg.budget)
        raise BudgetError(f"Run needs {planned} queries but the budget is {cfg.budget}")


def _load_dataset(cfg: config.RunConfig) -> Dataset:
    if not cfg.dataset:
        raise ConfigError("No dataset configured", code=ErrorCode.MISSING_INPUT)
    dataset = load_dataset(cfg.dataset, cfg.num_classes)
    if len(dataset) == 0:
        raise IngestionError(f"Dataset {cfg.dataset} is empty", code=ErrorCode.MALFORMED_CSV)
    return dataset


def split_sizes(cfg: config.RunConfig, total: int) -> Tuple[int, int]:
    """Validation takes the first m images, test the next n (both capped by the dataset)"""
    m = min(cfg.m, total)
    n = min(cfg.n, total - m)
    return m, n


def _load_cdf(cfg: config.RunConfig) -> Optional[EmpiricalCdf]:
    if cfg.model_kind != "transfer":
        return None
    path = Path(cfg.cdf_path)
    if not path.exists():
        raise ConfigError(f"Transfer CDF not found: {path}", code=ErrorCode.MISSING_INPUT)
    return EmpiricalCdf.from_json(path.read_text())


def _load_fit(cfg: config.RunConfig) -> Optional[FitResult]:
    if not cfg.fit_path:
        return None
    path = Path(cfg.fit_path)
    if not path.exists():
        raise ConfigError(f"Fit result not found: {path}", code=ErrorCode.MISSING_INPUT)
    return FitResult.from_dict(json.loads(path.read_text()))


def _load_diagnostics(cfg: config.RunConfig) -> Dict:
    if not cfg.diagnostics_path:
        return {}
    path = Path(cfg.diagnostics_path)
    if not path.exists():
        raise ConfigError(f"Diagnostics not found: {path}", code=ErrorCode.MISSING_INPUT)
    return json.loads(path.read_text())


def fit_on_validation(cfg: config.RunConfig, dataset: Dataset, oracle, specs: Sequence[TransformSpec],
                      s: int, m: int, cdf: Optional[EmpiricalCdf]) -> FitResult:
    if m < 1:
        raise ConfigError("Fitting needs a validation split (m >= 1)", code=ErrorCode.EMPTY_SPLIT)
    if s < 1:
        raise ConfigError("Fitting needs S >= 1")
    val = dataset.subset(0, m)
    estimates = {spec: estimate_many(oracle, val.images, spec, s, cfg.run_seed, 0, cfg.workers) for spec in specs}
    return grid_search(estimates, val.labels, dataset.num_classes, cfg.model_kind, cdf,
                       cfg.a_grid or A_GRID)


def evaluate_split(cfg: config.RunConfig, dataset: Dataset, oracle, s: int, m: int, n: int,
                   spec: Optional[TransformSpec], model: Optional[CalibrationModel]):
    """Estimates, confidences and metrics on the test split"""
    if n < 1:
        raise ConfigError("The test split is empty; lower m or add images", code=ErrorCode.EMPTY_SPLIT)
    test = dataset.subset(m, m + n)
    estimates = estimate_many(oracle, test.images, spec or DEFAULT_SPECS["gaussian"], s, cfg.run_seed, m, cfg.workers)
    confidences = assign_confidences(estimates, model)
    preds = score_predictions(confidences, [e.base_label for e in estimates], test.labels, dataset.num_classes)
    return estimates, confidences, preds


def _metrics_report(summary: Dict, n: int, s: int, spec: Optional[TransformSpec],
                    model: Optional[CalibrationModel], diagnostics: Dict, queries: int) -> Dict:
    return {
        **summary,
        "var": diagnostics.get("var_stat"),
        "ks": diagnostics.get("ks_stat"),
        "n": n,
        "s": s,
        "spec": spec.to_dict() if spec and s > 0 else None,
        "a": model.a if model else None,
        "model_kind": model.kind if model else "naive",
        "queries": queries,
    }


def _query_counts(oracle: QueryCache, planned: int) -> Dict:
    if oracle.lookups != planned:
        activity.log_warning(f"CLI: Issued {oracle.lookups} queries, planned {planned}")
    activity.log_info(f"CACHE: {oracle.lookups} lookups, {oracle.hits} hits, {oracle.remote_calls} remote calls")
    return {"queries": oracle.lookups, "remote_calls": oracle.remote_calls, "cache_hits": oracle.hits}


# ============== Commands ==============

def cmd_make_synthetic(cfg: config.RunConfig, args) -> Dict:
    """Write a synthetic model JSON and a dataset drawn from it"""
    shape = (cfg.synth_height, cfg.synth_width, cfg.synth_channels)
    world = dict(shape=shape, d_lat=cfg.synth_latent, num_classes=cfg.synth_classes, seed=cfg.run_seed,
                 nonlinear=cfg.synth_nonlinear, gain_offset=cfg.gain_offset, gain_scale=cfg.gain_scale)
    logit_scale = cfg.synth_logit_scale
    if cfg.synth_target_confidence is not None:
        logit_scale = fit_logit_scale(cfg.synth_target_confidence, **world)
        activity.log_info(f"SYNTHETIC: logit scale {logit_scale:.4g} for mean confidence "
                          f"{cfg.synth_target_confidence}")
    model = make_synthetic_model(logit_scale=logit_scale, **world)
    dataset = sample_synthetic_dataset(model, cfg.synth_samples, seed=cfg.run_seed + 1)

    model_path = Path(cfg.model_path)
    data_dir = Path(cfg.dataset)
    data_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".synthetic-", dir=data_dir.parent))
    try:
        write_dataset(dataset, staging)
        write_outputs(str(model_path.parent), {model_path.name: dump_json(model.to_dict())})
        if data_dir.exists():
            shutil.rmtree(data_dir)
        shutil.move(str(staging), str(data_dir))
    finally:
        if staging.exists():
            shutil.rmtree(staging)

    return {"model_path": str(model_path), "dataset": str(data_dir), "samples": len(dataset),
            "num_classes": model.num_classes, "shape": list(shape), "logit_scale": logit_scale}


def cmd_fit(cfg: config.RunConfig, args) -> Dict:
    """Grid-search a (and the spec for a family) on the validation split"""
    dataset = _load_dataset(cfg)
    specs = specs_from_config(cfg.transform)
    m, _ = split_sizes(cfg, len(dataset))
    planned = planned_queries(m, 0, cfg.s, len(specs))
    check_budget(cfg, planned)

    cdf = _load_cdf(cfg)
    oracle = build_oracle(cfg, dataset.shape, dataset.num_classes)
    fit = fit_on_validation(cfg, dataset, oracle, specs, cfg.s, m, cdf)

    write_outputs(cfg.output_dir, {"fit.json": dump_json(fit.to_dict())})
    return {"best_a": fit.best_a, "spec": fit.best_spec.to_dict(), "ece": fit.objective_value,
            "m": m, **_query_counts(oracle, planned)}


def cmd_estimate(cfg: config.RunConfig, args) -> Dict:
    """Estimate confidences on the test split and write the metrics report

    With S = 0 every prediction gets confidence 1. With a fit_path the
    stored a and spec are reused; otherwise a is fitted on the validation
    split first.
    """
    dataset = _load_dataset(cfg)
    m, n = split_sizes(cfg, len(dataset))
    s = cfg.s
    fit = None if s == 0 else _load_fit(cfg)
    fitting = s > 0 and fit is None
    specs = specs_from_config(cfg.transform) if fitting else []
    planned = planned_queries(m, n, s, len(specs), fitting=fitting)
    check_budget(cfg, planned)

    cdf = _load_cdf(cfg) if s > 0 else None
    oracle = build_oracle(cfg, dataset.shape, dataset.num_classes)
    files = {}
    if fitting:
        fit = fit_on_validation(cfg, dataset, oracle, specs, s, m, cdf)
        files["fit.json"] = dump_json(fit.to_dict())

    spec = fit.best_spec if fit else None
    if fit is not None and spec is None:
        spec = resolve_spec(cfg.transform)
    model = fit.model(cdf) if fit else None

    estimates, confidences, preds = evaluate_split(cfg, dataset, oracle, s, m, n, spec, model)
    counts = _query_counts(oracle, planned)
    report = _metrics_report(metrics_summary(preds), n, s, spec, model, _load_diagnostics(cfg), counts["queries"])

    files["estimates.csv"] = estimates_to_csv(estimates, confidences)
    files["metrics.json"] = dump_json(report)
    files["reliability.csv"] = reliability_bins(preds).to_csv()
    write_outputs(cfg.output_dir, files)

    return {**{k: report[k] for k in ("acc", "ece", "auroc", "brier", "a", "n", "s")}, **counts}


def cmd_diagnose(cfg: config.RunConfig, args) -> Dict:
    """Var and KS statistics of the latent noise on a white-box model"""
    dataset = _load_dataset(cfg)
    model = require_white_box(build_oracle(cfg, dataset.shape))
    spec = _diagnostic_spec(cfg)
    images = dataset.images[:cfg.diag_images]

    samples = collect_latent_noise(model, images, spec, cfg.diag_draws, cfg.run_seed, workers=cfg.workers)
    stats, ensemble = diagnose(samples, default_a_grid(cfg.diag_a_grid_size), spec)

    write_outputs(cfg.output_dir, {
        "diagnostics.json": dump_json(stats.to_dict()),
        "cdf_ensemble.csv": ensemble.to_csv(stats.best_fit_a),
    })
    return {"var": stats.var_stat, "ks": stats.ks_stat, "best_fit_a": stats.best_fit_a,
            "images": len(images), "draws": cfg.diag_draws}


def cmd_transfer_fit(cfg: config.RunConfig, args) -> Dict:
    """Learn the transfer model's empirical CDF on a white-box surrogate"""
    dataset = _load_dataset(cfg)
    model = require_white_box(build_oracle(cfg, dataset.shape))
    spec = _diagnostic_spec(cfg)
    images = dataset.images[:cfg.diag_images]

    samples = collect_latent_noise(model, images, spec, cfg.diag_draws, cfg.run_seed, workers=cfg.workers)
    cdf = learn_transfer_cdf(samples)

    write_outputs(cfg.output_dir, {"cdf.json": cdf.to_json() + "\n"})
    return {"n": cdf.n, "spec": spec.to_dict(), "images": len(images)}


def _diagnostic_spec(cfg: config.RunConfig) -> TransformSpec:
    fit = _load_fit(cfg)
    if fit is not None and fit.best_spec is not None:
        return fit.best_spec
    return resolve_spec(cfg.transform)


def _sweep_spec(cfg: config.RunConfig, family: str) -> TransformSpec:
    if isinstance(cfg.transform, dict) and cfg.transform.get("kind") == family:
        return TransformSpec.from_dict(cfg.transform)
    return DEFAULT_SPECS[family]


def cmd_sweep(cfg: config.RunConfig, args) -> Dict:
    """Fit and evaluate each family at every S in s_list (Brier against S)"""
    dataset = _load_dataset(cfg)
    m, n = split_sizes(cfg, len(dataset))
    planned = sum(planned_queries(m, n, s, 1, fitting=s > 0) for s in cfg.s_list) * len(cfg.sweep_families)
    check_budget(cfg, planned)

    cdf = _load_cdf(cfg)
    oracle = build_oracle(cfg, dataset.shape, dataset.num_classes)
    rows = []
    for family in cfg.sweep_families:
        spec = _sweep_spec(cfg, family)
        for s in cfg.s_list:
            model = fit_on_validation(cfg, dataset, oracle, [spec], s, m, cdf).model(cdf) if s > 0 else None
            _, _, preds = evaluate_split(cfg, dataset, oracle, s, m, n, spec, model)
            summary = metrics_summary(preds)
            rows.append([family, spec.label(), s, model.a if model else None,
                         summary["acc"], summary["ece"], summary["auroc"], summary["brier"]])
            activity.log_info(f"SWEEP: {spec.label()} S={s} brier={summary['brier']:.4f}")

    counts = _query_counts(oracle, planned)
    write_outputs(cfg.output_dir, {"sweep.csv": _csv(rows, SWEEP_COLUMNS)})
    return {"rows": len(rows), "families": list(cfg.sweep_families), "s_list": list(cfg.s_list), **counts}


def load_run_reports(paths: Sequence[str]) -> List[Tuple[str, Dict]]:
    """metrics.json of each run (a run directory or the file itself)"""
    reports = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            path = path / "metrics.json"
        if not path.exists():
            raise ConfigError(f"No metrics report at {path}", code=ErrorCode.MISSING_INPUT)
        try:
            reports.append((raw, json.loads(path.read_text())))
        except ValueError as e:
            raise ConfigError(f"{path}: not a JSON metrics report: {e}")
    return reports


def correlation_table(reports: Sequence[Tuple[str, Dict]]) -> List[List]:
    """Pearson r and p between each diagnostic statistic and each metric across runs"""
    rows = []
    for stat in DIAG_STATS:
        for metric in CORRELATED_METRICS:
            pairs = [(r[stat], r[metric]) for _, r in reports
                     if r.get(stat) is not None and r.get(metric) is not None]
            r_value = p_value = None
            try:
                r_value, p_value = pearson_r([x for x, _ in pairs], [y for _, y in pairs])
            except ProbeError as e:
                activity.metric_warning(f"pearson({stat},{metric})", e.message)
            rows.append([stat, metric, r_value, p_value, len(pairs)])
    return rows


def cmd_report(cfg: config.RunConfig, args) -> Dict:
    """Aggregate run reports into one table plus the correlation table"""
    reports = load_run_reports(args.runs)
    if not reports:
        raise ConfigError("report needs at least one run", code=ErrorCode.MISSING_INPUT)

    table = []
    for name, r in reports:
        spec = r.get("spec")
        table.append([name, r.get("model_kind"), TransformSpec.from_dict(spec).label() if spec else None,
                      r.get("s"), r.get("a"), r.get("n"), r.get("acc"), r.get("ece"), r.get("auroc"),
                      r.get("brier"), r.get("var"), r.get("ks")])
    correlations = correlation_table(reports)

    write_outputs(cfg.output_dir, {
        "report.csv": _csv(table, REPORT_COLUMNS),
        "pearson.csv": _csv(correlations, ["stat", "metric", "r", "p_value", "n"]),
    })
    return {"runs": len(reports),
            "pearson": [{"stat": s, "metric": m, "r": r, "p_value": p} for s, m, r, p, _ in correlations]}


def cmd_serve(cfg: config.RunConfig, args) -> Dict:
    """Serve the synthetic model over /predict until interrupted"""
    if args.app_factory is None:
        raise ConfigError("serve is only available through run.py")
    oracle = SyntheticOracle(SyntheticModel.load(cfg.model_path))
    app = args.app_factory(oracle)
    activity.server_started(cfg.host, cfg.port)
    app.run(host=cfg.host, port=cfg.port, debug=False)
    return {"host": cfg.host, "port": cfg.port}


def cmd_ping(cfg: config.RunConfig, args) -> Dict:
    """Check a prediction server answers on /api/status"""
    result = config.test_connection(cfg.endpoint, cfg.timeout)
    if not result["connected"]:
        raise QueryError(f"Cannot reach {cfg.endpoint}: {result['error']}", recoverable=False)
    return result


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "estimate": cmd_estimate,
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "transfer-fit": cmd_transfer_fit,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "serve": cmd_serve,
    "ping": cmd_ping,
}

# Flag name -> config key; flags left unset keep the config value
OVERRIDES = [
    ("oracle", str), ("model_path", str), ("endpoint", str), ("playback_path", str), ("cache_path", str),
    ("dataset", str), ("num_classes", int), ("s", int), ("m", int), ("n", int), ("run_seed", int),
    ("output_dir", str), ("budget", int), ("model_kind", str), ("cdf_path", str), ("fit_path", str),
    ("diagnostics_path", str), ("workers", int), ("diag_images", int), ("diag_draws", int),
    ("host", str), ("port", int),
]


def _transform_arg(value: str):
    """Family name, or an inline JSON/YAML mapping such as '{kind: gaussian, sigma: 0.1}'"""
    parsed = yaml.safe_load(value)
    if isinstance(parsed, (str, dict)):
        return parsed
    raise argparse.ArgumentTypeError(f"transform must be a family name or a mapping, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confprobe",
                                     description="Calibrated confidence for top-1 black-box classifiers")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file overriding config/default.yaml")
    for name, kind in OVERRIDES:
        common.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None)
    common.add_argument("--transform", type=_transform_arg, default=None)
    common.add_argument("--s-list", dest="s_list", type=int, nargs="+", default=None)
    common.add_argument("--families", dest="sweep_families", nargs="+", default=None)
    common.add_argument("--a-grid", dest="a_grid", type=float, nargs="+", default=None)

    for name, func in COMMANDS.items():
        cmd = sub.add_parser(name, parents=[common], help=func.__doc__.splitlines()[0])
        if name == "report":
            cmd.add_argument("runs", nargs="+", help="Run directories or metrics.json files")
    return parser


def resolve_config(args) -> config.RunConfig:
    raw = config.load_config(args.config)
    overrides = {name: getattr(args, name, None) for name, _ in OVERRIDES}
    for name in ("transform", "s_list", "sweep_families", "a_grid"):
        overrides[name] = getattr(args, name, None)
    return config.build_run_config(config.merge_overrides(raw, overrides))


def main(argv: Optional[Sequence[str]] = None, app_factory=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.app_factory = app_factory
    command = args.command

    try:
        cfg = resolve_config(args)
        activity.run_started(command, cfg.run_seed)
        summary = COMMANDS[command](cfg, args)
    except ProbeError as e:
        activity.run_failed(command, format_error_message(e))
        print(format_error_message(e), file=sys.stderr)
        print(json.dumps({"command": command, "status": "error", **e.to_dict()}, sort_keys=True))
        return exit_code_for(e)

    activity.run_completed(command, cfg.output_dir)
    activity.save_run_to_history(command, cfg.output_dir, summary)
    print(json.dumps({"command": command, "status": "ok", **summary}, sort_keys=True))
    return 0
