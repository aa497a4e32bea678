"""Run persistence: training runs, checkpoint evaluation, sweeps and plot export.

Layout of one run directory::

    config.yaml                 effective configuration
    seed-<s>/manifest.json      config snapshot, code stamp, file index, sampled ids
    seed-<s>/rounds.jsonl       one round report per line
    seed-<s>/rounds.csv         per-round scalar series
    seed-<s>/timings.csv        wall-clock per round (kept apart so metrics stay reproducible)
    seed-<s>/checkpoints/       round-<r>.json at the configured cadence
    seed-<s>/final.json         final global model
    seed-<s>/final_eval.json    held-out evaluation of the final model
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from . import __version__
from .config import SWEEP_AXES, ExperimentConfig, apply_axis, check_sweep, dump_config
from .data import generate_federation, read_federation, task_spec_from_dict, task_spec_to_dict, true_client_divergence, write_federation
from .errors import ConfigError
from .metrics import evaluate_clients
from .model import GlobalModel
from .server import EVAL_STREAM, Federation, sample_clients, stream_rng, stream_seed

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ROUTEFL_OUTPUT_ROOT"
MANIFEST_FORMAT = "routefl.manifest"

ROUND_COLUMNS = ["round", "clients", "total_n", "dropped", "mean_r1", "acc_flow", "acc_global", "acc_local", "local_fraction"]
SUMMARY_COLUMNS = [
    "acc_flow", "acc_global", "acc_local", "acc_soft", "c_pct_flow", "c_pct_global", "i_pct_flow",
    "i_pct_global", "mean_r1", "mean_trained_r1", "local_fraction", "rho_kl_local", "rho_true_local",
]
HEADLINE = {"flow": "acc_flow", "global_only": "acc_global", "local_only": "acc_local", "fedavg_plain": "acc_global"}
ROUND_EVAL_KEYS = ("acc_flow", "acc_global", "acc_local", "local_fraction")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve_dir(cfg: ExperimentConfig, suffix: str = "") -> Path:
    base = Path(cfg.output_dir)
    if not base.is_absolute():
        base = output_root() / base
    return base / (cfg.name + suffix)


def source_stamp() -> str:
    """Hash of the package sources, recorded so a run can be tied to the code that made it."""
    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for path in sorted(pkg.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def load_clients(cfg: ExperimentConfig, seed: int):
    """Client datasets and (when known) the generating task for one run seed."""
    if cfg.data_file:
        path = Path(cfg.data_file)
        if not path.exists():
            raise ConfigError(f"data_file {path} does not exist")
        clients = read_federation(path)
        header = json.loads(path.read_text().split("\n", 1)[0])
        task = task_spec_from_dict(header["task"]) if "task" in header else None
        if clients and clients[0].kind != cfg.kind:
            raise ConfigError(f"data_file holds {clients[0].kind} data but the task is {cfg.kind}")
        return clients, task
    task = cfg.task_for_seed(seed)
    return generate_federation(task), task


def _round_evaluator(datasets, model, hyper, seed_fn, split="valid"):
    summary = evaluate_clients(datasets, model, hyper, seed_fn, split=split)["summary"]
    return {k: summary[k] for k in ROUND_EVAL_KEYS}


def final_evaluation(cfg: ExperimentConfig, clients, task, model: GlobalModel, seed: int, soft: bool | None = None) -> dict:
    """Pre-inference and evaluation on ``cfg.eval_clients`` clients drawn from the eval stream."""
    ids = sample_clients(sorted(c.client_id for c in clients), cfg.eval_clients, 0, stream_rng(seed, EVAL_STREAM, 0))
    by_id = {c.client_id: c for c in clients}
    chosen = [by_id[i] for i in sorted(ids)]
    truth = (lambda cid: true_client_divergence(task, cid)) if task is not None else None
    result = evaluate_clients(
        chosen,
        model,
        cfg.train,
        lambda cid: stream_seed(seed, EVAL_STREAM, 0, cid),
        split=cfg.eval.split,
        soft=cfg.eval.soft if soft is None else soft,
        truth=truth,
    )
    result["summary"]["accuracy"] = result["summary"][HEADLINE[cfg.variant]]
    result["variant"] = cfg.variant
    result["seed"] = int(seed)
    return result


def run_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path, group: str = "") -> dict:
    seed_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = seed_dir / "checkpoints"
    clients, task = load_clients(cfg, seed)
    spec = cfg.model_spec()
    fed = Federation(clients, spec, cfg.train, cfg.federation_config(seed), evaluator=_round_evaluator)
    fcfg = fed.config

    rounds_jsonl = (seed_dir / "rounds.jsonl").open("w")
    rounds_csv_fh = (seed_dir / "rounds.csv").open("w", newline="")
    timings_fh = (seed_dir / "timings.csv").open("w", newline="")
    rounds_csv = csv.writer(rounds_csv_fh)
    rounds_csv.writerow(ROUND_COLUMNS)
    timings = csv.writer(timings_fh)
    timings.writerow(["round", "wall_clock_s"])
    reports = []

    def on_round(model, report):
        reports.append(report)
        rounds_jsonl.write(json.dumps(report.to_dict(), sort_keys=True, default=_json_default) + "\n")
        ev = report.eval or {}
        rounds_csv.writerow(
            [report.round, len(report.n), report.total_n, len(report.dropped), _fmt(report.mean_r1)]
            + [_fmt(ev.get(k)) for k in ROUND_EVAL_KEYS]
        )
        timings.writerow([report.round, f"{report.wall_clock:.6f}"])
        if fcfg.checkpoint_every and report.round % fcfg.checkpoint_every == 0:
            ckpt_dir.mkdir(exist_ok=True)
            model.save(ckpt_dir / f"round-{report.round:04d}.json")

    try:
        model, _ = fed.run_training(on_round=on_round)
    finally:
        rounds_jsonl.close()
        rounds_csv_fh.close()
        timings_fh.close()

    model.save(seed_dir / "final.json")
    result = final_evaluation(cfg, clients, task, model, seed)
    trained = [r.mean_r1 for r in reports if r.mean_r1 is not None]
    result["summary"]["mean_trained_r1"] = float(np.mean(trained)) if trained else None
    write_json(seed_dir / "final_eval.json", result)

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "name": cfg.name,
        "group": group,
        "seed": int(seed),
        "variant": cfg.variant,
        "code": {"package": "routefl", "version": __version__, "source_sha256": source_stamp()},
        "config": cfg.to_dict(),
        "task": task_spec_to_dict(task) if task is not None else None,
        "model_spec": spec.to_dict(),
        "train": cfg.train.__dict__ | {"preinference_global_epochs_effective": cfg.train.pre_epochs},
        "federation": fcfg.__dict__,
        "files": {
            "rounds_jsonl": "rounds.jsonl",
            "rounds_csv": "rounds.csv",
            "timings": "timings.csv",
            "final_checkpoint": "final.json",
            "final_eval": "final_eval.json",
            "checkpoints": sorted(p.name for p in ckpt_dir.glob("*.json")) if ckpt_dir.exists() else [],
        },
        "sampled": [r.sampled for r in reports],
        "final_fingerprint": model.fingerprint(),
    }
    write_json(seed_dir / "manifest.json", manifest)
    return result


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v))


def run_experiment(cfg: ExperimentConfig, run_dir: Path | None = None, group: str = "") -> Path:
    """Train and evaluate every seed of ``cfg``; returns the run directory."""
    run_dir = Path(run_dir) if run_dir is not None else resolve_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(dump_config(cfg))
    summaries = []
    for seed in cfg.seeds:
        log.info("run %s seed %d", cfg.name, seed)
        res = run_seed(cfg, seed, run_dir / f"seed-{seed}", group)
        summaries.append({"seed": seed, **res["summary"]})
    _write_rows(run_dir / "summary.csv", ["seed"] + SUMMARY_COLUMNS, summaries)
    return run_dir


def _write_rows(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _axis_label(axis: str, value) -> str:
    return f"{axis}={value}"


def run_sweep(cfg: ExperimentConfig, axis: str | None = None, values=None, sweep_dir: Path | None = None) -> Path:
    """One run per axis value (each over all seeds) plus merged comparison CSVs."""
    if axis is None:
        if cfg.sweep is None:
            raise ConfigError("no sweep axis given and the config has no sweep section")
        axis, values = cfg.sweep.axis, cfg.sweep.values
    elif values is None:
        values = cfg.sweep.values if cfg.sweep is not None and cfg.sweep.axis == axis else []
    check_sweep(cfg, axis, values)
    sweep_dir = Path(sweep_dir) if sweep_dir is not None else resolve_dir(cfg, f"-sweep-{axis}")
    sweep_dir.mkdir(parents=True, exist_ok=True)
    (sweep_dir / "config.yaml").write_text(dump_config(cfg))
    merged, finals = [], []
    for value in values:
        sub = apply_axis(cfg, axis, value)
        label = _axis_label(axis, value)
        run_dir = run_experiment(sub, sweep_dir / label, group=label)
        for seed in sub.seeds:
            seed_dir = run_dir / f"seed-{seed}"
            with (seed_dir / "rounds.csv").open() as fh:
                for row in csv.DictReader(fh):
                    merged.append({"axis": axis, "value": value, "seed": seed, **row})
            final = json.loads((seed_dir / "final_eval.json").read_text())["summary"]
            finals.append({"axis": axis, "value": value, "seed": seed, **final})
    _write_rows(sweep_dir / "sweep.csv", ["axis", "value", "seed"] + ROUND_COLUMNS, merged)
    _write_rows(sweep_dir / "sweep_final.csv", ["axis", "value", "seed"] + SUMMARY_COLUMNS, finals)
    return sweep_dir


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint, seed: int | None = None, soft: bool | None = None) -> dict:
    """Pre-inference and hard (optionally also soft) evaluation of a saved global model."""
    path = Path(checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        model = GlobalModel.load(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None
    spec = cfg.model_spec()
    if model.spec != spec:
        raise ConfigError(f"checkpoint model {model.spec.to_dict()} does not match config model {spec.to_dict()}")
    seed = cfg.seeds[0] if seed is None else seed
    clients, task = load_clients(cfg, seed)
    result = final_evaluation(cfg, clients, task, model, seed, soft)
    result["checkpoint_fingerprint"] = model.fingerprint()
    return result


# ------------------------------------------------------------------ plot export


def _manifests(root: Path):
    return sorted(root.rglob("manifest.json"))


def export_plots(root, out_dir=None) -> tuple[Path, list]:
    """Write tidy ``accuracy.csv`` and ``routing.csv`` for every run under ``root``.

    Returns the output directory and the list of missing files that were
    skipped.  Raises :class:`ConfigError` when nothing could be exported.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    out_dir = Path(out_dir) if out_dir is not None else root / "plots"
    manifests = _manifests(root)
    missing, acc_rows, route_rows = [], [], []
    if not manifests:
        missing.append(str(root / "**" / "manifest.json"))
    for mpath in manifests:
        man = json.loads(mpath.read_text())
        seed, variant, group = man["seed"], man["variant"], man.get("group", "")
        rounds = mpath.parent / man["files"]["rounds_jsonl"]
        if rounds.exists():
            for line in rounds.read_text().splitlines():
                rep = json.loads(line)
                values = {"mean_r1": rep.get("mean_r1"), "total_n": rep.get("total_n")}
                values.update(rep.get("eval") or {})
                for metric, value in values.items():
                    if value is not None:
                        acc_rows.append({"group": group, "round": rep["round"], "seed": seed,
                                         "variant": variant, "metric": metric, "value": value})
        else:
            missing.append(str(rounds))
        final = mpath.parent / man["files"]["final_eval"]
        if final.exists():
            for c in json.loads(final.read_text())["clients"]:
                for t, (m, s) in enumerate(zip(c["mean_r_local"], c["std_r_local"])):
                    route_rows.append({"group": group, "seed": seed, "timestep": t,
                                       "client_id": c["client_id"], "mean_r_local": m, "std_r_local": s})
        else:
            missing.append(str(final))
    if not acc_rows and not route_rows:
        raise ConfigError("nothing to export; missing: " + ", ".join(missing))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_rows(out_dir / "accuracy.csv", ["group", "round", "seed", "variant", "metric", "value"], acc_rows)
    _write_rows(out_dir / "routing.csv", ["group", "seed", "timestep", "client_id", "mean_r_local", "std_r_local"], route_rows)
    return out_dir, missing


def gen_data(cfg: ExperimentConfig, path, seed: int | None = None) -> Path:
    seed = cfg.seeds[0] if seed is None else seed
    task = cfg.task_for_seed(seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_federation(path, generate_federation(task), task)
    return path


__all__ = [
    "SWEEP_AXES",
    "evaluate_checkpoint",
    "export_plots",
    "gen_data",
    "run_experiment",
    "run_sweep",
]
