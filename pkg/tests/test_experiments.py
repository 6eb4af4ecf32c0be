"""Experiment orchestration: config handling, reports, caching, determinism."""

import json

import numpy as np
import pytest

from httransformer.experiments import (
    ExperimentConfig,
    ExperimentContext,
    MetricsReport,
    derived_seed,
    load_config,
    run_experiment,
    sweep,
)
from httransformer.seqdata import ConfigError

TINY = dict(
    toy_num_sequences=48, toy_segment_min=5, toy_segment_max=10, toy_label_vocab=5,
    toy_num_matrices=6, layers=1, d_model=16, heads=2, ff_dim=24, dropout=0.0, cat_dim=4,
    epochs=2, batch_size=16, patience=2, max_len=60, supervised_epochs=2, sft_epochs=2,
    coles_parents_per_batch=6, seeds="0",
)


def tiny_config(tmp_path, **kw):
    args = dict(TINY)
    args.update(kw)
    return ExperimentConfig(out_dir=str(tmp_path / "run"), **args)


def test_config_roundtrip_and_fingerprint(tmp_path):
    cfg = tiny_config(tmp_path)
    clone = ExperimentConfig.from_dict(cfg.to_dict())
    assert clone == cfg
    assert clone.fingerprint() == cfg.fingerprint()
    assert ExperimentConfig(seeds="0,1").fingerprint() != cfg.fingerprint()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"not_a_key": 1})


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"epochs": 3, "d_model": 32}))
    cfg = load_config(path, {"epochs": "5", "lr": "0.01"})
    assert cfg.epochs == 5 and cfg.d_model == 32 and cfg.lr == 0.01


def test_method_list_validation(tmp_path):
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, methods="ntp-last,warp-drive").method_list()


def test_derived_seed_stable():
    assert derived_seed(3, 1, 0) == derived_seed(3, 1, 0)
    assert derived_seed(3, 1, 0) != derived_seed(3, 1, 1)


def test_metrics_report_csv_shape(tmp_path):
    report = MetricsReport(fingerprint="f")
    report.add("m", "t", 0, "accuracy", 0.5)
    report.add("m", "t", 1, "accuracy", 0.7)
    report.finalize_medians()
    text = report.to_csv_text()
    lines = text.strip().split("\n")
    assert lines[0] == "method,task,seed,metric,value"
    assert len(lines) == 4
    assert lines[-1].startswith("m,t,median,accuracy,")
    assert report.value("m", "t") == pytest.approx(0.6)


def test_run_experiment_emits_full_grid(tmp_path):
    cfg = tiny_config(tmp_path, methods="ntp-last,ntp-ht", seeds="0,1")
    report = run_experiment(cfg)
    cells = {(r["method"], r["task"], r["seed"]) for r in report.rows
             if r["metric"] == "accuracy"}
    for method in ("ntp-last", "ntp-ht"):
        for task in ("global", "local"):
            for seed in ("0", "1", "median"):
                assert (method, task, seed) in cells
    out = tmp_path / "run"
    assert (out / "report.csv").exists()
    assert (out / "summary.txt").exists()
    assert (out / "report.json").exists()


def test_pretrain_cache_shared_between_extraction_methods(tmp_path):
    cfg = tiny_config(tmp_path, methods="ntp-last,ntp-avg", seeds="0")
    ctx = ExperimentContext(cfg)
    run_experiment(cfg, context=ctx)
    assert set(ctx._pretrained) == {("ntp", 0)}


def test_run_experiment_wraps_stage_failures(tmp_path):
    cfg = tiny_config(tmp_path, methods="supervised", tasks="missing-task")
    with pytest.raises(RuntimeError, match="supervised"):
        run_experiment(cfg)


def test_csv_reports_byte_identical_across_runs(tmp_path):
    a = run_experiment(tiny_config(tmp_path / "a", methods="ntp-last", seeds="0"))
    b = run_experiment(tiny_config(tmp_path / "b", methods="ntp-last", seeds="0"))
    assert a.to_csv_text() == b.to_csv_text()


def test_sweep_rows_per_cell(tmp_path):
    cfg = tiny_config(tmp_path, seeds="0", epochs=1)
    rows = sweep(cfg, f_values=(0.0, 0.2), p_values=(0.5,), out_dir=str(tmp_path / "sw"))
    acc = [r for r in rows if r["metric"] == "accuracy"]
    # 3 cells x 2 tasks x 1 seed
    assert len(acc) == 6
    assert (tmp_path / "sw" / "sweep.csv").exists()
    params = {(r["param"], r["param_value"]) for r in rows}
    assert params == {("f", 0.0), ("f", 0.2), ("p", 0.5)}
