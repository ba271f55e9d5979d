from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from flowboost import geometry as geo
from flowboost.conditioning import score_sample
from flowboost.config import ConfigError, config_from_dict, load_config
from flowboost.geometry import PointConfiguration, ProblemInstance
from flowboost.local_search import radii_lp
from flowboost.pipeline import DatasetError, boost_loop, emit_histogram, histogram, load_dataset, save_dataset

HEIL = ProblemInstance("heilbronn", 7)


def tiny_config(out_dir, kind="spheres", count=8, dim=3, rounds=1, **loop):
    return {
        "instance": {"kind": kind, "count": count, "dim": dim},
        "push": {"srp": {"outer_iters": 10}},
        "model": {"width": 32, "depth": 1},
        "train": {"epochs": 3, "batch_size": 8},
        "sampler": {"steps": 6},
        "finetune": {"epochs": 1, "batch": 8, "grad_steps_per_epoch": 2},
        "loop": {"boost_rounds": rounds, "initial_samples": 8, "samples_per_round": 8, "top_fraction": 0.5, **loop},
        "io": {"out_dir": str(out_dir)},
    }


def samples(inst, k=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(k):
        pts = rng.uniform(size=(inst.count, inst.dim))
        cfg = PointConfiguration(pts, radii_lp(pts) if inst.has_radii else None)
        out.append(score_sample(inst, cfg))
    return out


# --- datasets -----------------------------------------------------------------------

@pytest.mark.parametrize("inst", [HEIL, ProblemInstance("circles", 5), ProblemInstance("star", 6),
                                  ProblemInstance("spheres", 5, 3)])
def test_dataset_round_trip_bytes(tmp_path, inst):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(a, inst, samples(inst), seed=11)
    got_inst, header, data = load_dataset(a)
    assert got_inst == inst and header["seed"] == 11 and len(data) == 3
    save_dataset(b, got_inst, data, seed=header["seed"])
    assert a.read_bytes() == b.read_bytes()


def test_header_fields(tmp_path):
    p = tmp_path / "d.jsonl"
    save_dataset(p, HEIL, samples(HEIL), seed=4)
    header = json.loads(p.read_text().splitlines()[0])["header"]
    assert {"kind", "count", "dim", "seed", "version"} <= set(header)


def test_stale_score(tmp_path):
    p = tmp_path / "d.jsonl"
    save_dataset(p, HEIL, samples(HEIL))
    lines = p.read_text().splitlines()
    rec = json.loads(lines[2])
    rec["score"] += 1e-6
    lines[2] = json.dumps(rec)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="stale score"):
        load_dataset(p)


def test_score_within_tolerance_accepted(tmp_path):
    p = tmp_path / "d.jsonl"
    save_dataset(p, HEIL, samples(HEIL))
    lines = p.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["score"] += 5e-10
    lines[1] = json.dumps(rec)
    p.write_text("\n".join(lines) + "\n")
    assert len(load_dataset(p)[2]) == 3


def test_empty_file_is_empty_dataset(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert load_dataset(p) == (None, None, [])


def test_malformed_line_number(tmp_path):
    p = tmp_path / "d.jsonl"
    save_dataset(p, HEIL, samples(HEIL))
    lines = p.read_text().splitlines()
    lines[3] = lines[3][:-5]
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"d\.jsonl:4: malformed line"):
        load_dataset(p)


def test_record_before_header(tmp_path):
    p = tmp_path / "d.jsonl"
    save_dataset(p, HEIL, samples(HEIL))
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[1:]) + "\n")
    with pytest.raises(DatasetError, match=":1: record before header"):
        load_dataset(p)


def test_shape_mismatch(tmp_path):
    p = tmp_path / "d.jsonl"
    save_dataset(p, HEIL, samples(HEIL))
    lines = p.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["points"] = rec["points"][:-1]
    lines[1] = json.dumps(rec)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=":2: configuration shape"):
        load_dataset(p)


# --- histograms ---------------------------------------------------------------------

def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_constant_values_single_bin(tmp_path):
    csv_path, svg_path = emit_histogram(np.full(50, 0.3), 10, tmp_path / "h")
    rows = _read_csv(csv_path)
    occupied = [r for r in rows if int(r["count"]) > 0]
    assert len(occupied) == 1
    width = float(occupied[0]["bin_right"]) - float(occupied[0]["bin_left"])
    assert float(occupied[0]["density"]) == pytest.approx(1 / width, rel=1e-12)
    assert svg_path.read_text().lstrip().startswith("<?xml")


def test_csv_normalisation(tmp_path, rng):
    series = {"training": rng.normal(size=300), "pushed": rng.normal(1, 2, size=77)}
    csv_path, _ = emit_histogram(series, 17, tmp_path / "h")
    rows = _read_csv(csv_path)
    for name in series:
        mass = sum(float(r["density"]) * (float(r["bin_right"]) - float(r["bin_left"]))
                   for r in rows if r["series"] == name)
        assert abs(mass - 1.0) <= 1e-12
    edges = {(r["bin_left"], r["bin_right"]) for r in rows}
    assert len(edges) == 17


def test_uniform_histogram_flat(rng):
    edges, hist = histogram({"u": rng.uniform(size=10_000)}, 20)
    dens = hist["u"][1]
    assert np.all(np.abs(dens - 1.0) <= 0.15)


def test_empty_histogram_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_histogram([], 10, tmp_path / "h")
    with pytest.raises(ValueError):
        emit_histogram({"a": [], "b": []}, 10, tmp_path / "h")


# --- configuration ------------------------------------------------------------------

def test_unknown_keys_rejected(tmp_path):
    base = tiny_config(tmp_path)
    for bad in ({"bogus": 1}, {"loop": {"rounds": 2}}, {"push": {"srp": {"outer": 3}}},
                {"instance": {"kind": "heilbronn", "count": 5, "colour": 1}}):
        with pytest.raises(ConfigError, match="unknown key"):
            config_from_dict({**base, **bad})


def test_config_invariants(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict(tiny_config(tmp_path, rounds=0))
    with pytest.raises(ConfigError):
        config_from_dict({**tiny_config(tmp_path), "train": {"epochs": "many"}})
    with pytest.raises(ConfigError):
        config_from_dict({"loop": {}})


def test_config_round_trip(tmp_path):
    cfg = config_from_dict(tiny_config(tmp_path))
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    again = load_config(p)
    assert again.to_dict() == cfg.to_dict()
    assert again.push.srp.outer_iters == 10 and again.loop.initial_samples == 8


def test_model_defaults_per_kind():
    sph = config_from_dict({"instance": {"kind": "spheres", "count": 10, "dim": 3}})
    heil = config_from_dict({"instance": {"kind": "heilbronn", "count": 10}})
    assert (sph.model.width, sph.model.depth, sph.model.heads) == (512, 2, 8)
    assert (heil.model.width, heil.model.depth, heil.model.heads) == (256, 6, 8)
    partial = config_from_dict({"instance": {"kind": "star", "count": 10}, "model": {"depth": 1}})
    assert (partial.model.width, partial.model.depth) == (256, 1)


def test_every_example_config_loads():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.json"))
    assert files
    for f in files:
        load_config(f)


# --- boosting loop ------------------------------------------------------------------

@pytest.fixture(scope="module")
def loop_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("loop")
    summary = boost_loop(config_from_dict(tiny_config(out, rounds=2)))
    return out, summary


def test_loop_artifacts(loop_run):
    out, summary = loop_run
    assert summary["status"] == "ok"
    for name in ("dataset.jsonl", "model.ckpt", "summary.json", "best_trajectory.png"):
        assert (out / name).is_file()
    for rnd in ("round_00", "round_01"):
        for name in ("hist.csv", "hist.svg", "best.jsonl", "best.png", "student.ckpt"):
            assert (out / rnd / name).is_file()
    assert json.loads((out / "summary.json").read_text()) == json.loads(json.dumps(summary))


def test_loop_summary_consistent(loop_run):
    out, summary = loop_run
    inst, _, data = load_dataset(out / "dataset.jsonl")
    assert summary["best"] == data[0].score
    best = [r["best_so_far"] for r in summary["rounds"]]
    assert all(b >= a for a, b in zip([summary["initial_best"]] + best, best))
    for r in summary["rounds"]:
        for key in ("training", "generated", "pushed"):
            assert r[key]["count"] == 0 or r[key]["min"] <= r[key]["mean"] <= r[key]["max"]
        # pushed-best can only tie or beat the training-best after merging
        assert r["best_so_far"] >= r["training"]["max"]
    _, _, best_rec = load_dataset(out / "round_01" / "best.jsonl")
    assert best_rec[0].score == summary["rounds"][1]["best_so_far"]
    assert geo.objective(inst, best_rec[0].config) == best_rec[0].score


def test_loop_deterministic(loop_run, tmp_path):
    out, _ = loop_run
    again = tmp_path / "again"
    boost_loop(config_from_dict(tiny_config(again, rounds=2)))
    for name in ("dataset.jsonl", "model.ckpt", "summary.json", "round_01/hist.csv", "round_01/student.ckpt"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_loop_failure_summary(tmp_path, monkeypatch):
    import flowboost.pipeline as pl

    def broken(*a, **k):
        raise RuntimeError("sampler exploded")

    monkeypatch.setattr(pl, "gas_sample", broken)
    summary = boost_loop(config_from_dict(tiny_config(tmp_path)))
    assert summary["status"] == "failed" and "sampler exploded" in summary["error"]
    assert (tmp_path / "dataset.jsonl").is_file()
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "failed"
