import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from pyramidflow.config import (RunConfig, config_digest, dump_config, from_flat, known_keys, load_config,
                                parse_config_text)
from pyramidflow.detector import init_model
from pyramidflow.train import (CSV_COLUMNS, MetricsReport, emit_report, load_checkpoint, load_report,
                               report_json, save_checkpoint, train)

SMALL = {"train.train_scenes": 32, "train.eval_scenes": 8, "train.batch_size": 4}


def small_config(**extra):
    return from_flat({**SMALL, **extra})


# -------------------------------------------------------------------- config

def test_parse_values_and_comments():
    flat = parse_config_text('# comment\nseed = 3\npyramid.builder = cfg\ntrain.decay_at = [0.5, 0.8]\n\n')
    assert flat == {"seed": 3, "pyramid.builder": "cfg", "train.decay_at": [0.5, 0.8]}


def test_unknown_key_is_an_error():
    with pytest.raises(ValueError, match="unknown config key"):
        from_flat({"pyramid.bulider": "fpn"})


@pytest.mark.parametrize("text", ["seed 3", "seed = 1\nseed = 2"])
def test_malformed_text(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


@pytest.mark.parametrize("flat", [
    {"pyramid.builder": "bifpn"}, {"pyramid.cascade_times": 0}, {"train.lr": -1.0},
    {"loss.mode": "aux-only"}, {"backbone.input_size": 48}, {"loss.range_bounds": [8, 16]},
    {"data.image_size": 96}, {"eval.iou_thresh": [1.5]},
])
def test_invalid_values_rejected_before_compute(flat):
    with pytest.raises(ValueError):
        from_flat(flat)


def test_dump_parse_round_trip(tmp_path):
    cfg = small_config(**{"pyramid.builder": "cfg", "pyramid.cascade_times": 3, "loss.mode": "aux"})
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert set(parse_config_text(path.read_text())) == known_keys()


def test_digest_matches_independent_hash_of_config_file(tmp_path):
    cfg = small_config(seed=5)
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(cfg))
    flat = {}
    for line in path.read_text().splitlines():
        k, v = line.split(" = ", 1)
        flat[k] = json.loads(v)
    del flat["out_dir"]
    independent = hashlib.sha256(json.dumps(flat, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    assert config_digest(cfg) == independent
    assert config_digest(from_flat({**SMALL, "seed": 5, "out_dir": "elsewhere"})) == independent
    assert config_digest(small_config(seed=6)) != independent


def test_default_schedule_shape():
    tc = RunConfig().train
    assert (tc.lr, tc.momentum, tc.weight_decay, tc.steps) == (0.01, 0.9, 0.0, 2000)
    assert math.isclose(tc.lr_at(1000), 0.01)
    assert math.isclose(tc.lr_at(1500), 0.001) and math.isclose(tc.lr_at(1840), 0.0001)
    assert tc.lr_at(0) < tc.lr_at(50) < tc.lr_at(100)


# --------------------------------------------------------------------- train

def test_zero_steps_reports_initial_evaluation_only(tmp_path):
    report, _ = train(small_config(**{"train.steps": 0}), tmp_path)
    assert report.steps == 0 and report.curves == []
    assert [e["step"] for e in report.evals] == [0]
    assert report.ap["overall"] == report.evals[0]["ap"]
    assert all(0.0 <= report.ap[k] <= 1.0 for k in ("overall", "small", "medium", "large"))


def test_eval_loss_drops_after_200_steps_on_default_task(tmp_path):
    cfg = from_flat({"train.steps": 200, "train.eval_every": 200, "train.eval_scenes": 32})
    report, _ = train(cfg, write=False)
    first, last = report.evals[0], report.evals[-1]
    assert last["step"] == 200
    assert last["loss"] < first["loss"]


def test_training_is_deterministic_and_files_are_byte_stable(tmp_path):
    cfg = small_config(**{"train.steps": 6, "train.eval_every": 3, "loss.mode": "aux-uncertainty"})
    r1, _ = train(cfg, tmp_path / "a")
    r2, _ = train(cfg, tmp_path / "b")
    assert r1 == r2
    for name in ("report.json", "metrics.csv", "checkpoint.npz", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_report_round_trip_and_csv_rows(tmp_path):
    cfg = small_config(**{"train.steps": 4, "train.eval_every": 2, "train.log_every": 1})
    report, _ = train(cfg, tmp_path)
    back = load_report(tmp_path / "report.json")
    assert back == report
    assert report_json(back) == (tmp_path / "report.json").read_text()
    doc = json.loads((tmp_path / "report.json").read_text())
    assert {"config_digest", "seed", "steps", "curves", "ap", "wall_time_s"} <= set(doc)
    assert set(doc["ap"]) == {"overall", "small", "medium", "large", "per_class"}
    assert doc["config_digest"] == config_digest(cfg)
    rows = list(csv.reader((tmp_path / "metrics.csv").read_text().splitlines()))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [int(r[0]) for r in rows[1:]] == [e["step"] for e in report.evals] == [0, 2, 4]
    for row, ev in zip(rows[1:], report.evals):
        assert [float(v) for v in row[1:]] == [ev[c] for c in CSV_COLUMNS[1:]]
    assert len(report.curves) == 4


def test_emit_report_errors(tmp_path):
    report = MetricsReport("x", 0, 0)
    with pytest.raises(ValueError):
        emit_report(report, ("yaml",), tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="cannot write"):
        emit_report(report, ("json",), blocker / "sub")


def test_checkpoint_round_trip(tmp_path):
    model = small_config().model
    params = init_model(model, 0)
    save_checkpoint(params, tmp_path / "ck.npz")
    fresh = init_model(model, 1)
    load_checkpoint(tmp_path / "ck.npz", fresh)
    assert all(np.array_equal(params[k].data, fresh[k].data) for k in params)
    other = init_model(from_flat({**SMALL, "pyramid.builder": "fg"}).model, 0)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "ck.npz", other)


@pytest.mark.parametrize("path", sorted((Path(__file__).parents[1] / "configs").glob("*.cfg")), ids=lambda p: p.name)
def test_shipped_configs_load(path):
    assert isinstance(load_config(path), RunConfig)
