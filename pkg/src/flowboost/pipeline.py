"""Datasets, histograms and the closed boosting loop."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import geometry as geo
from . import model as nn
from .conditioning import ScoredSample, condition_dim, sampling_condition
from .config import RunConfig
from .geometry import PointConfiguration, ProblemInstance, ProblemKind
from .local_search import final_push, generate_training_set, radii_lp, sort_samples
from .reward import finetune
from .sampler import gas_sample
from .training import TrainHyper, train

log = logging.getLogger(__name__)

SCORE_TOL = 1e-9


class DatasetError(ValueError):
    pass


def event(name: str, **fields) -> None:
    log.info(json.dumps({"event": name, **fields}, sort_keys=True))


# --------------------------------------------------------------------------
# datasets


def dataset_header(instance: ProblemInstance, seed: int) -> dict:
    return {**instance.to_dict(), "seed": int(seed), "version": __version__}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_dataset(path, instance: ProblemInstance, samples: Sequence[ScoredSample], seed: int = 0) -> None:
    """JSON-Lines: a header line, then one record per sample."""
    lines = [_dumps({"header": dataset_header(instance, seed)})]
    lines += [_dumps(s.to_record()) for s in samples]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    """Returns (instance or None, header or None, samples); every score is re-checked."""
    instance, header, samples = None, None, []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed line ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DatasetError(f"{path}:{lineno}: malformed line (expected an object)")
            if "header" in rec:
                if header is not None or samples:
                    raise DatasetError(f"{path}:{lineno}: unexpected header line")
                header = rec["header"]
                try:
                    instance = ProblemInstance(header["kind"], header["count"], header.get("dim", 2),
                                               header.get("box_side", 1.0))
                except (KeyError, TypeError, ValueError) as exc:
                    raise DatasetError(f"{path}:{lineno}: bad header ({exc})") from exc
                continue
            if instance is None:
                raise DatasetError(f"{path}:{lineno}: record before header")
            samples.append(_parse_record(rec, instance, f"{path}:{lineno}"))
    return instance, header, samples


def _parse_record(rec: dict, instance: ProblemInstance, where: str) -> ScoredSample:
    unknown = set(rec) - {"points", "radii", "score", "condition"}
    if unknown or not {"points", "score", "condition"} <= set(rec):
        raise DatasetError(f"{where}: malformed line (fields {sorted(rec)})")
    try:
        cfg = PointConfiguration(rec["points"], rec.get("radii"))
        score = float(rec["score"])
        cond = np.asarray(rec["condition"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: malformed line ({exc})") from exc
    if cfg.points.shape != (instance.count, instance.dim):
        raise DatasetError(f"{where}: configuration shape {cfg.points.shape} does not match header")
    if cond.shape != (condition_dim(instance.kind),):
        raise DatasetError(f"{where}: condition has {cond.size} entries")
    try:
        actual = geo.objective(instance, cfg)
    except ValueError as exc:
        raise DatasetError(f"{where}: {exc}") from exc
    if not abs(actual - score) <= SCORE_TOL:
        raise DatasetError(f"{where}: stale score (stored {score!r}, actual {actual!r})")
    return ScoredSample(cfg, score, cond)


# --------------------------------------------------------------------------
# histograms


def histogram(series: dict, bins: int = 20):
    """Shared bin edges across all series; density integrates to 1 per series."""
    allv = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in series.values()])
    if allv.size == 0:
        raise ValueError("histogram needs at least one value")
    edges = np.histogram_bin_edges(allv, bins=bins)
    out = {}
    for name, v in series.items():
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size == 0:
            continue
        counts, _ = np.histogram(v, bins=edges)
        out[name] = (counts, counts / (v.size * np.diff(edges)))
    return edges, out


def emit_histogram(values, bins: int, path, xlabel: str = "objective") -> tuple[Path, Path]:
    """Write <path>.csv and <path>.svg; ``values`` is an array or a dict of named arrays."""
    from .plotting import histogram_figure

    series = values if isinstance(values, dict) else {"values": values}
    if not any(np.asarray(v).size for v in series.values()):
        raise ValueError("histogram needs at least one value")
    edges, hist = histogram(series, bins)
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "bin_left", "bin_right", "count", "density"])
        for name, (counts, dens) in hist.items():
            for k in range(len(counts)):
                w.writerow([name, repr(float(edges[k])), repr(float(edges[k + 1])), int(counts[k]), repr(float(dens[k]))])
    histogram_figure(edges, {k: v[1] for k, v in hist.items()}, svg_path, xlabel)
    return csv_path, svg_path


# --------------------------------------------------------------------------
# boosting loop


def architecture_for(cfg: RunConfig) -> nn.Architecture:
    m = cfg.model
    return nn.Architecture(cfg.instance.dim, condition_dim(cfg.instance.kind), m.width, m.depth, m.heads, m.freqs, m.ff_mult)


def raw_score(instance: ProblemInstance, cfg: PointConfiguration) -> float:
    """Exact score of an unpushed generator sample (radii filled by LP for circles)."""
    if instance.kind is ProblemKind.CIRCLES:
        return float(np.sum(radii_lp(np.clip(cfg.points, 0.0, 1.0))))
    return geo.objective(instance, cfg)


def _push_job(args):
    cfg, instance, push, seed = args
    return final_push(cfg, instance, push, seed)


def push_all(configs, instance, push, seed: int, workers: int = 1) -> list:
    jobs = [(c, instance, push, seed + i) for i, c in enumerate(configs)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_push_job, jobs))
    return [_push_job(j) for j in jobs]


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"count": 0}
    return {"count": int(v.size), "mean": float(v.mean()), "max": float(v.max()), "min": float(v.min())}


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def boost_loop(cfg: RunConfig) -> dict:
    """generate -> (train -> sample -> fine-tune -> push -> merge) x rounds.

    Writes the dataset, checkpoints, per-round histograms and best
    configurations, and summary.json under cfg.io.out_dir.
    """
    from .plotting import configuration_figure, trajectory_figure

    inst = cfg.instance
    loop = cfg.loop
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    summary = {"instance": inst.to_dict(), "seed": loop.seed, "rounds": [], "status": "ok"}
    dataset: list = []
    student = None
    try:
        event("generate_start", samples=loop.initial_samples)
        dataset = generate_training_set(inst, loop.initial_samples, loop.top_fraction, cfg.push, loop.seed, loop.workers)
        save_dataset(cfg.path(cfg.io.dataset), inst, dataset, loop.seed)
        best_so_far = dataset[0].score
        summary["initial_best"] = best_so_far
        for rnd in range(loop.boost_rounds):
            event("round_start", round=rnd)
            rdir = out / f"round_{rnd:02d}"
            rdir.mkdir(exist_ok=True)
            train_scores = [s.score for s in dataset]
            X = np.stack([s.config.points for s in dataset])
            C = np.stack([s.condition for s in dataset])
            hyper = TrainHyper(**{**cfg.train.__dict__, "seed": cfg.train.seed + loop.seed + rnd})
            res = train(X, C, inst, hyper, architecture_for(cfg), init=student)
            student, teacher = res.student, res.teacher
            ckpt_meta = {"round": rnd, "epoch_losses": res.epoch_losses}
            nn.save_checkpoint(cfg.path(cfg.io.checkpoint), student, ckpt_meta, hyper.seed)
            cond = sampling_condition(inst, C)
            rseed = loop.seed + 7919 * (rnd + 1)
            raw = gas_sample(student, inst, loop.samples_per_round, cond, cfg.sampler, rseed + 1, loop.workers)
            generated = [c for c in raw if c is not None]
            gen_scores = []
            for c in generated:
                try:
                    gen_scores.append(raw_score(inst, c))
                except ValueError:
                    pass
            # the fine-tuned student warm-starts the next round's retraining
            ft = finetune(student, teacher, inst, cfg.finetune, cfg.sampler, cond, rseed, loop.workers)
            student = ft.student
            nn.save_checkpoint(rdir / "student.ckpt", student, {"round": rnd, "finetune": ft.epoch_log}, rseed)
            pushed = push_all(generated, inst, cfg.push, rseed + 2, loop.workers)
            push_scores = [p.score for p in pushed]
            merged = sort_samples(inst, dataset + pushed)
            keep = max(1, math.ceil(loop.top_fraction * len(merged)))
            dataset = merged[:keep]
            save_dataset(cfg.path(cfg.io.dataset), inst, dataset, loop.seed)
            new_best = dataset[0].score
            if geo.better(inst, best_so_far, new_best):
                raise RuntimeError("best-so-far regressed during merge")
            best_so_far = new_best
            series = {"training": train_scores, "generated": gen_scores, "pushed": push_scores}
            emit_histogram({k: v for k, v in series.items() if v}, loop.histogram_bins, rdir / "hist")
            best = dataset[0]
            save_dataset(rdir / "best.jsonl", inst, [best], loop.seed)
            configuration_figure(inst, best.config, rdir / "best.png", f"round {rnd}: {best.score:.6g}")
            rec = {
                "round": rnd,
                "training": _stats(train_scores),
                "generated": _stats(gen_scores),
                "pushed": _stats(push_scores),
                "dropped": len(raw) - len(generated),
                "best_so_far": best_so_far,
                "final_train_loss": res.epoch_losses[-1],
            }
            summary["rounds"].append(rec)
            event("round_end", round=rnd, best_so_far=best_so_far)
        trajectory_figure([r["round"] for r in summary["rounds"]], [r["best_so_far"] for r in summary["rounds"]],
                          out / "best_trajectory.png")
    except Exception as exc:  # any stage failure: keep partial state, report failure
        log.exception("round failed")
        summary["status"] = "failed"
        summary["error"] = f"{type(exc).__name__}: {exc}"
        if dataset:
            save_dataset(cfg.path(cfg.io.dataset), inst, dataset, loop.seed)
    summary["best"] = dataset[0].score if dataset else None
    _write_json(out / "summary.json", summary)
    return summary
