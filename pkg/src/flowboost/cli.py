"""Command-line entry point: flowboost <subcommand> [--config ...] [--seed ...] [--out ...]."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import model as nn
from .conditioning import score_sample, sampling_condition
from .config import ConfigError, RunConfig, load_config
from .geometry import PointConfiguration, ProblemInstance
from .local_search import generate_training_set
from .pipeline import (
    DatasetError,
    architecture_for,
    boost_loop,
    emit_histogram,
    event,
    load_dataset,
    push_all,
    save_dataset,
)
from .reward import finetune
from .sampler import gas_sample
from .training import train

log = logging.getLogger("flowboost")


class UsageError(ValueError):
    pass


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        if msg.startswith("{"):
            return msg
        return json.dumps({"event": "log", "level": record.levelname.lower(), "message": msg})


def _setup_logging(quiet: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if quiet else logging.INFO)


def _config(args) -> RunConfig:
    if args.config is None:
        raise UsageError(f"{args.command} needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.loop = dataclasses.replace(cfg.loop, seed=args.seed)
    if args.out is not None:
        cfg.io = dataclasses.replace(cfg.io, out_dir=args.out)
    if args.workers is not None:
        cfg.loop = dataclasses.replace(cfg.loop, workers=args.workers)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_checked(path, instance: ProblemInstance):
    inst, _, samples = load_dataset(path)
    if inst is not None and inst != instance:
        raise DatasetError(f"{path}: header {inst.to_dict()} does not match the configured instance")
    return samples


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    data = generate_training_set(cfg.instance, cfg.loop.initial_samples, cfg.loop.top_fraction, cfg.push,
                                 cfg.loop.seed, cfg.loop.workers)
    save_dataset(cfg.path(cfg.io.dataset), cfg.instance, data, cfg.loop.seed)
    event("dataset_written", path=str(cfg.path(cfg.io.dataset)), samples=len(data), best=data[0].score)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    samples = _load_checked(args.dataset or cfg.path(cfg.io.dataset), cfg.instance)
    if not samples:
        raise DatasetError("training dataset is empty")
    X = np.stack([s.config.points for s in samples])
    C = np.stack([s.condition for s in samples])
    hyper = dataclasses.replace(cfg.train, seed=cfg.train.seed + cfg.loop.seed)
    init = nn.load_checkpoint(args.init)[0] if args.init else None
    res = train(X, C, cfg.instance, hyper, architecture_for(cfg), init=init)
    meta = {"epoch_losses": res.epoch_losses}
    nn.save_checkpoint(cfg.path(cfg.io.checkpoint), res.student, meta, hyper.seed)
    nn.save_checkpoint(cfg.path("teacher.ckpt"), res.teacher, meta, hyper.seed)
    return 0


def _condition(cfg: RunConfig, dataset_path):
    samples = _load_checked(dataset_path or cfg.path(cfg.io.dataset), cfg.instance)
    if not samples:
        raise DatasetError("conditioning dataset is empty")
    return sampling_condition(cfg.instance, np.stack([s.condition for s in samples]))


def cmd_sample(args) -> int:
    cfg = _config(args)
    params, _ = nn.load_checkpoint(args.checkpoint or cfg.path(cfg.io.checkpoint))
    cond = _condition(cfg, args.dataset)
    n = args.n or cfg.loop.samples_per_round
    raw = gas_sample(params, cfg.instance, n, cond, cfg.sampler, cfg.loop.seed, cfg.loop.workers)
    kept = [score_sample(cfg.instance, c) for c in raw if c is not None]
    save_dataset(cfg.path(args.output), cfg.instance, kept, cfg.loop.seed)
    event("samples_written", path=str(cfg.path(args.output)), kept=len(kept), dropped=len(raw) - len(kept))
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    student, _ = nn.load_checkpoint(args.checkpoint or cfg.path(cfg.io.checkpoint))
    teacher_path = args.teacher or cfg.path("teacher.ckpt")
    teacher = nn.load_checkpoint(teacher_path)[0] if Path(teacher_path).exists() else student.copy()
    cond = _condition(cfg, args.dataset)
    res = finetune(student, teacher, cfg.instance, cfg.finetune, cfg.sampler, cond, cfg.loop.seed, cfg.loop.workers)
    nn.save_checkpoint(cfg.path(args.output), res.student, {"finetune": res.epoch_log}, cfg.loop.seed)
    return 0


def cmd_push(args) -> int:
    cfg = _config(args)
    samples = _load_checked(args.input or cfg.path("samples.jsonl"), cfg.instance)
    pushed = push_all([s.config for s in samples], cfg.instance, cfg.push, cfg.loop.seed, cfg.loop.workers)
    save_dataset(cfg.path(args.output), cfg.instance, pushed, cfg.loop.seed)
    if pushed:
        best = max(p.score for p in pushed) if cfg.instance.maximize else min(p.score for p in pushed)
        event("pushed_written", path=str(cfg.path(args.output)), samples=len(pushed), best=best)
    return 0


def cmd_loop(args) -> int:
    cfg = _config(args)
    summary = boost_loop(cfg)
    return 0 if summary["status"] == "ok" else 1


def _read_configurations(path):
    """Yield (instance, index, config, stored score or None) from a JSONL dataset or a JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.strip()
    if not stripped:
        return
    try:
        doc = json.loads(stripped)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict) and "header" not in doc:
        inst = ProblemInstance(doc["kind"], doc["count"], doc.get("dim", 2), doc.get("box_side", 1.0))
        yield inst, 0, PointConfiguration(doc["points"], doc.get("radii")), doc.get("score")
        return
    inst = None
    k = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: malformed line ({exc.msg})") from exc
        if "header" in rec:
            h = rec["header"]
            inst = ProblemInstance(h["kind"], h["count"], h.get("dim", 2), h.get("box_side", 1.0))
            continue
        if inst is None:
            raise DatasetError(f"{path}:{lineno}: record before header")
        try:
            cfg = PointConfiguration(rec["points"], rec.get("radii"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed line ({exc})") from exc
        yield inst, k, cfg, rec.get("score")
        k += 1


def cmd_eval(args) -> int:
    out = _out_dir(args)
    dest = out / args.output
    rows = []
    # score everything first so a bad input leaves no partial file behind
    for path in args.files:
        for inst, k, cfg, stored in _read_configurations(path):
            score = geo.objective(inst, cfg)
            r = 0.5 * score if inst.kind is geo.ProblemKind.SPHERES else None
            rep = geo.feasibility(cfg, inst, r)
            rows.append([path, k, inst.kind.value, inst.count, "" if stored is None else repr(float(stored)),
                         repr(score), int(rep.feasible), repr(max(rep))])
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "index", "kind", "count", "stored_score", "score", "feasible", "max_violation"])
        w.writerows(rows)
    event("eval_written", path=str(dest))
    return 0


def cmd_hist(args) -> int:
    out = _out_dir(args)
    series = {}
    for path in args.files:
        name = Path(path).stem
        series[name] = _scores(path)
    if not any(series.values()):
        raise UsageError("no objective values to histogram")
    csv_path, svg_path = emit_histogram(series, args.bins, out / args.output)
    event("histogram_written", csv=str(csv_path), svg=str(svg_path))
    return 0


def _scores(path):
    return [geo.objective(inst, cfg) for inst, _, cfg, _ in _read_configurations(path)]


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def flags(parser, default):
        parser.add_argument("--config", default=default, help="JSON run configuration")
        parser.add_argument("--seed", type=int, default=default, help="override loop.seed")
        parser.add_argument("--out", default=default, help="override the output directory")
        parser.add_argument("--workers", type=int, default=default, help="override loop.workers")
        parser.add_argument("-q", "--quiet", action="store_true", default=default or False,
                            help="only log errors")

    p = argparse.ArgumentParser(prog="flowboost", description=__doc__)
    flags(p, None)
    # flags may also follow the subcommand; SUPPRESS keeps them from clobbering the global ones
    common = argparse.ArgumentParser(add_help=False)
    flags(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="build the initial elite dataset")

    s = sub.add_parser("train", parents=[common], help="train the flow model on a dataset")
    s.add_argument("--dataset")
    s.add_argument("--init", help="warm-start checkpoint")

    s = sub.add_parser("sample", parents=[common], help="draw geometry-aware samples")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset", help="dataset the sampling condition is taken from")
    s.add_argument("-n", type=int, help="number of samples")
    s.add_argument("--output", default="samples.jsonl")

    s = sub.add_parser("finetune", parents=[common], help="reward-guided fine-tuning")
    s.add_argument("--checkpoint")
    s.add_argument("--teacher")
    s.add_argument("--dataset")
    s.add_argument("--output", default="student.ckpt")

    s = sub.add_parser("push", parents=[common], help="final push on a sample file")
    s.add_argument("--input")
    s.add_argument("--output", default="pushed.jsonl")

    sub.add_parser("loop", parents=[common], help="run the full boosting loop")

    s = sub.add_parser("eval", parents=[common], help="re-score configuration files")
    s.add_argument("files", nargs="+")
    s.add_argument("--output", default="eval.csv")

    s = sub.add_parser("hist", parents=[common], help="histogram objective values of configuration files")
    s.add_argument("files", nargs="+")
    s.add_argument("--bins", type=int, default=20)
    s.add_argument("--output", default="hist")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "finetune": cmd_finetune,
    "push": cmd_push,
    "loop": cmd_loop,
    "eval": cmd_eval,
    "hist": cmd_hist,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.quiet)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, UsageError, FileNotFoundError, KeyError) as exc:
        log.error(json.dumps({"event": "validation_error", "message": str(exc)}))
        return 2
    except Exception as exc:  # noqa: BLE001
        log.error(json.dumps({"event": "error", "message": f"{type(exc).__name__}: {exc}"}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
