"""Command-line entry point: prepare, train, eval, sweep, report.

Every command writes a ``manifest.json`` next to its outputs recording the
config, dataset checksums, code version, timings and produced files.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from . import __version__
from .baselines import NextItemGRU, PopModel, candidate_scores, mmr_rerank, read_scores, write_scores
from .data import DataError, load_dataset, prepare_dataset
from .metrics import MetricsReport, distance_matrix, evaluate_lists
from .trainer import ConfigError, TrainConfig, TrainingError, evaluate, load_checkpoint, recommend_all, train

log = logging.getLogger("idsr")

TABLE_COLUMNS = ["recall@10", "recall@20", "mrr@10", "mrr@20", "ild@10", "ild@20"]
DEFAULT_SWEEP = [round(0.1 * k, 1) for k in range(11)]


class CheckpointError(ValueError):
    pass


class ReportError(ValueError):
    pass


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
            cwd=Path(__file__).parent, timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def write_manifest(out: Path, command: str, config: dict, dataset_dir, started: str, artifacts) -> dict:
    ds_checksums = {}
    if dataset_dir is not None:
        ds_manifest = json.loads((Path(dataset_dir) / "manifest.json").read_text())
        ds_checksums = ds_manifest.get("outputs", {})
    key = json.dumps({"command": command, "config": config, "data": ds_checksums}, sort_keys=True)
    manifest = {
        "run_id": hashlib.sha256(key.encode()).hexdigest()[:12],
        "command": command,
        "config": config,
        "dataset": str(dataset_dir) if dataset_dir is not None else None,
        "dataset_checksums": ds_checksums,
        "code_version": code_version(),
        "started": started,
        "finished": _now(),
        "artifacts": sorted(str(a) for a in artifacts),
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_config(path, overrides=None) -> TrainConfig:
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping of config keys")
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key=value")
        raw[key.strip()] = yaml.safe_load(value)
    return TrainConfig.from_dict(raw)


def metrics_table_row(name: str, report: MetricsReport) -> list[str]:
    row = report.row()
    return [name] + [f"{row[c]:.4f}" if c in row else "" for c in TABLE_COLUMNS]


def write_metrics(out: Path, name: str, report: MetricsReport) -> list[Path]:
    js = out / "metrics.json"
    js.write_text(report.dumps() + "\n")
    tsv = out / "metrics.tsv"
    with open(tsv, "w") as f:
        f.write("\t".join(["model"] + TABLE_COLUMNS) + "\n")
        f.write("\t".join(metrics_table_row(name, report)) + "\n")
    return [js, tsv]


# --- commands ---------------------------------------------------------------


def cmd_prepare(ratings, fmt, out, seed=0, genres=None) -> Path:
    out = Path(out)
    ds = prepare_dataset(ratings, fmt, out, seed=seed, genre_path=genres)
    log.info("prepared %s: %s", out, json.dumps(ds.manifest["split"]))
    return out


def cmd_train(config: TrainConfig, data_dir, out, resume=None) -> Path:
    started = _now()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(data_dir)
    ckpt = out / "checkpoint.pt"
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as logf:
        def on_epoch(record):
            logf.write(json.dumps(record, sort_keys=True) + "\n")
            logf.flush()
            log.info("epoch %s: %s", record["epoch"], json.dumps(record.get("validation")))

        model, report = train(config, ds.split, ds.catalog, ds.n_items, checkpoint_path=ckpt,
                              resume=resume, on_epoch=on_epoch)
    (out / "train_report.json").write_text(report.dumps() + "\n")
    val = evaluate(model, ds.split.validation, ds.catalog, (10, 20), config.eval_batch_size)
    (out / "validation_metrics.json").write_text(val.dumps() + "\n")
    artifacts = [ckpt, log_path, out / "train_report.json", out / "validation_metrics.json"]
    write_manifest(out, "train", config.to_dict(), data_dir, started, artifacts)
    return out


def cmd_eval(data_dir, out, checkpoint=None, baseline=None, ks=(10, 20), split="test", mmr=False,
             theta=0.5, candidates=100, scores_file=None, export_scores=False, name=None) -> MetricsReport:
    """Evaluate a checkpoint, the POP baseline, or an exported score file (optionally MMR re-ranked)."""
    started = _now()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(data_dir)
    samples = getattr(ds.split, split)
    ks = sorted(int(k) for k in ks)
    n = max(ks)
    dist = distance_matrix(ds.catalog)
    artifacts = []
    config = {"split": split, "ks": ks, "mmr": mmr}

    if scores_file is not None:
        scores = read_scores(scores_file)
        if len(scores.items) != len(samples):
            raise CheckpointError(f"score file has {len(scores.items)} samples, {split} split has {len(samples)}")
        if not mmr:
            lists = scores.items[:, :n]
        tag = name or scores.tag or "scores"
    elif baseline == "pop":
        model = PopModel(ds.split.train, ds.n_items)
        tag = name or "POP"
    elif checkpoint is not None:
        model, meta, _ = load_checkpoint(checkpoint)
        if meta["n_items"] != ds.n_items:
            raise CheckpointError(
                f"checkpoint vocabulary has {meta['n_items']} items, dataset has {ds.n_items}"
            )
        tag = name or {"idsr": "IDSR", "gru": "GRU"}[meta["model"]]
        config["checkpoint"] = str(checkpoint)
        config["model"] = meta
    else:
        raise CheckpointError("eval needs --checkpoint, --baseline pop or --scores")

    if mmr or export_scores:
        if scores_file is None:
            if not isinstance(model, NextItemGRU):
                raise CheckpointError("MMR re-ranking and score export need a GRU next-item checkpoint")
            scores = candidate_scores(model, samples, candidates)
        if export_scores:
            path = out / "scores.tsv"
            scores.tag = tag
            write_scores(path, scores)
            artifacts.append(path)
    if mmr:
        lists = mmr_rerank(scores, candidates, theta, n, dist=dist)
        tag = f"{tag}+MMR"
        config.update(theta=theta, candidates=candidates)
    elif scores_file is None:
        lists = recommend_all(model, samples, n)

    report = evaluate_lists(lists, samples.targets, ks, ds.catalog, dist=dist, config=config)
    artifacts += write_metrics(out, tag, report)
    write_manifest(out, "eval", config, data_dir, started, artifacts)
    return report


def run_experiment(config: TrainConfig, data_dir, run_dir, reuse=False) -> dict:
    """Train into ``run_dir`` and evaluate on test under ``run_dir/eval``.

    With ``reuse``, a finished run whose manifest holds the same config is read back
    instead of retrained.
    """
    run_dir = Path(run_dir)
    metrics_path = run_dir / "eval" / "metrics.json"
    manifest_path = run_dir / "manifest.json"
    if reuse and metrics_path.exists() and manifest_path.exists():
        if json.loads(manifest_path.read_text())["config"] == config.to_dict():
            return _sweep_row(config, run_dir)
    cmd_train(config, data_dir, run_dir)
    cmd_eval(data_dir, run_dir / "eval", checkpoint=run_dir / "checkpoint.pt")
    return _sweep_row(config, run_dir)


def _sweep_one(args):
    config_dict, data_dir, run_dir, reuse = args
    return run_experiment(TrainConfig.from_dict(config_dict), data_dir, run_dir, reuse)


def _sweep_row(config, run_dir: Path) -> dict:
    test = MetricsReport.from_dict(json.loads((run_dir / "eval" / "metrics.json").read_text()))
    val = MetricsReport.from_dict(json.loads((run_dir / "validation_metrics.json").read_text()))
    report = json.loads((run_dir / "train_report.json").read_text())
    return {
        "lam": config.lam,
        "status": "ok",
        "recall@20": test.recall[20],
        "mrr@20": test.mrr[20],
        "ild@20": test.ild[20],
        "recall@10": test.recall[10],
        "mrr@10": test.mrr[10],
        "ild@10": test.ild[10],
        "val_recall@20": val.recall[20],
        "val_ild@20": val.ild[20],
        "best_epoch": report["best_epoch"],
        "run": str(run_dir),
        "train_seconds": report["seconds"],
    }


SWEEP_COLUMNS = ["lam", "status", "recall@20", "mrr@20", "ild@20", "recall@10", "mrr@10", "ild@10",
                 "val_recall@20", "val_ild@20", "best_epoch", "run"]


def cmd_sweep(config: TrainConfig, data_dir, out, values=None, param="lam", jobs=1, reuse=False) -> list[dict]:
    """One training + test evaluation per value of ``param``; failures are recorded, not fatal."""
    if param != "lam":
        raise ConfigError(f"sweep parameter must be 'lam', got {param!r}")
    started = _now()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    values = DEFAULT_SWEEP if values is None else [float(v) for v in values]
    tasks = []
    for v in values:
        cfg = TrainConfig.from_dict({**config.to_dict(), "lam": v})
        tasks.append((cfg.to_dict(), str(data_dir), str(out / f"lam_{v:.1f}"), reuse))

    rows = []
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            futures = [pool.submit(_sweep_one, t) for t in tasks]
            results = []
            for fut in futures:
                try:
                    results.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - record and continue
                    results.append(exc)
    else:
        results = []
        for t in tasks:
            try:
                results.append(_sweep_one(t))
            except Exception as exc:  # noqa: BLE001 - record and continue
                log.error("sweep run %s failed: %s", t[2], exc)
                results.append(exc)
    for v, t, res in zip(values, tasks, results):
        if isinstance(res, Exception):
            rows.append({"lam": v, "status": f"failed: {type(res).__name__}: {res}", "run": t[2]})
        else:
            rows.append(res)

    table = out / "sweep.tsv"
    with open(table, "w") as f:
        f.write("\t".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            f.write("\t".join(_fmt(row.get(c, "")) for c in SWEEP_COLUMNS) + "\n")
    plots = plot_sweep(rows, out)
    write_manifest(out, "sweep", {**config.to_dict(), "values": values}, data_dir, started,
                   [table, *plots] + [Path(t[2]) for t in tasks])
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def plot_sweep(rows, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r.get("status") == "ok"]
    if not ok:
        return []
    lams = [r["lam"] for r in ok]
    paths = []
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    for ax, metric in zip(axes, ("recall@20", "mrr@20", "ild@20")):
        ax.plot(lams, [r[metric] for r in ok], marker="o")
        ax.set_xlabel("lambda")
        ax.set_title(metric.replace("recall", "Recall").replace("mrr", "MRR").replace("ild", "ILD"))
        ax.grid(alpha=0.3)
        single, sax = plt.subplots(figsize=(4, 3.4))
        sax.plot(lams, [r[metric] for r in ok], marker="o")
        sax.set_xlabel("lambda")
        sax.set_ylabel(metric)
        sax.grid(alpha=0.3)
        single.tight_layout()
        p = out / f"sweep_{metric.replace('@', '_at_')}.png"
        single.savefig(p, dpi=120)
        plt.close(single)
        paths.append(p)
    fig.tight_layout()
    p = out / "sweep.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return [p, *paths]


def _find_metrics(run_dir: Path) -> Path:
    for cand in (run_dir / "metrics.json", run_dir / "eval" / "metrics.json"):
        if cand.exists():
            return cand
    raise ReportError(f"{run_dir}: no metrics.json found")


def _run_name(run_dir: Path, metrics_path: Path) -> str:
    tsv = metrics_path.with_name("metrics.tsv")
    if tsv.exists():
        lines = tsv.read_text().splitlines()
        if len(lines) > 1:
            return lines[1].split("\t")[0]
    return run_dir.name


def cmd_report(run_dirs, out=None) -> str:
    """Merge run metrics into one table; the best value per column is wrapped in ``**``.

    Every column is higher-is-better, so the marker goes on each column maximum;
    values equal at four decimals share it.
    """
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    rows = []
    ks_ref = None
    for d in run_dirs:
        d = Path(d)
        path = _find_metrics(d)
        rep = MetricsReport.from_dict(json.loads(path.read_text()))
        if ks_ref is None:
            ks_ref = (rep.ks, d)
        elif rep.ks != ks_ref[0]:
            raise ReportError(f"inconsistent K sets: {ks_ref[1]} has {ks_ref[0]}, {d} has {rep.ks}")
        rows.append((_run_name(d, path), rep.row()))
    names = [name for name, _ in rows]
    rows = [(f"{name} [{d}]" if names.count(name) > 1 else name, r) for (name, r), d in zip(rows, run_dirs)]
    columns = [c for c in TABLE_COLUMNS if c in rows[0][1]]
    # compare printed values so ties at table precision are all marked
    shown = [(name, {c: f"{r[c]:.4f}" for c in columns}) for name, r in rows]
    best = {c: max(float(r[c]) for _, r in shown) for c in columns}
    lines = ["\t".join(["model"] + columns)]
    for name, r in shown:
        cells = []
        for c in columns:
            s = r[c]
            cells.append(f"**{s}**" if float(s) == best[c] else s)
        lines.append("\t".join([name] + cells))
    text = "\n".join(lines) + "\n"
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    return text


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idsr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="build a dataset directory from MovieLens files")
    s.add_argument("ratings", help="u.data (ml100k) or ratings.dat (ml1m)")
    s.add_argument("--format", choices=["ml100k", "ml1m"], default="ml100k")
    s.add_argument("--genres", help="u.item / movies.dat (default: next to the ratings file)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)

    def add_config(s):
        s.add_argument("--config", help="YAML file of training settings")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--lam", type=float, help="shorthand for --set lam=...")
        s.add_argument("--intents", type=int, help="shorthand for --set n_intents=...")
        s.add_argument("--seed", type=int, help="shorthand for --set seed=...")

    s = sub.add_parser("train", help="train IDSR or the GRU baseline")
    add_config(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--baseline", choices=["pop"])
    src.add_argument("--scores", help="exported score file to evaluate or re-rank")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ks", type=int, nargs="+", default=[10, 20])
    s.add_argument("--split", choices=["train", "validation", "test"], default="test")
    s.add_argument("--mmr", action="store_true", help="re-rank with maximal marginal relevance")
    s.add_argument("--theta", type=float, default=0.5)
    s.add_argument("--candidates", type=int, default=100)
    s.add_argument("--export-scores", action="store_true")
    s.add_argument("--name", help="row label in the metric table")

    s = sub.add_parser("sweep", help="train and evaluate over a grid of lambda values")
    add_config(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--param", default="lam")
    s.add_argument("--values", type=float, nargs="+")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--reuse", action="store_true", help="skip runs whose outputs match the config")

    s = sub.add_parser("report", help="merge run metrics into one comparison table")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out")
    return p


def _config_from_args(args) -> TrainConfig:
    overrides = list(args.set)
    for flag, key in (("lam", "lam"), ("intents", "n_intents"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    return load_config(args.config, overrides)


ERROR_CATEGORIES = [
    (DataError, "data", 2),
    (ConfigError, "config", 3),
    (TrainingError, "training", 4),
    (CheckpointError, "checkpoint", 5),
    (ReportError, "report", 6),
    (FileNotFoundError, "io", 7),
]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "prepare":
            out = cmd_prepare(args.ratings, args.format, args.out, args.seed, args.genres)
            print(out)
        elif args.command == "train":
            out = cmd_train(_config_from_args(args), args.data, args.out, args.resume)
            print(out)
        elif args.command == "eval":
            report = cmd_eval(args.data, args.out, checkpoint=args.checkpoint, baseline=args.baseline,
                              ks=args.ks, split=args.split, mmr=args.mmr, theta=args.theta,
                              candidates=args.candidates, scores_file=args.scores,
                              export_scores=args.export_scores, name=args.name)
            print(json.dumps(report.row(), indent=2))
        elif args.command == "sweep":
            rows = cmd_sweep(_config_from_args(args), args.data, args.out, args.values, args.param,
                             args.jobs, args.reuse)
            print((Path(args.out) / "sweep.tsv").read_text(), end="")
            if any(r["status"] != "ok" for r in rows):
                return 1
        elif args.command == "report":
            print(cmd_report(args.runs, args.out), end="")
    except Exception as exc:
        for cls, category, code in ERROR_CATEGORIES:
            if isinstance(exc, cls):
                print(f"error[{category}]: {exc}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
