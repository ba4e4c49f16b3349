"""Stage orchestration: content-keyed reuse, invalidation, and failure paths.

Everything here runs on a scaled-down config (2 clients, 3 categories, a few
epochs) so the full pipeline finishes in about a second.
"""

import os

import pytest

from feddeo.config import load_config
from feddeo.diffusion import IntegrityError
from feddeo.pipeline import STAGE_ORDER, StageError, run_pipeline, run_sweep

SMALL = {
    "categories": "3", "domains": "2", "clients": "2",
    "train_per_class": "40", "test_per_class": "30",
    "timesteps": "40", "pretrain_epochs": "4", "pretrain_per_mode": "40",
    "pretrain_batch": "64", "model_hidden": "24", "model_depth": "2",
    "time_dim": "8", "cond_dim": "8",
    "description_epochs": "2", "description_batch": "32",
    "samples_per_pair": "6",
    "classifier_hidden": "16", "classifier_depth": "1",
    "classifier_epochs": "15", "classifier_batch": "32",
    "fedavg_rounds": "3", "kl_neighbors": "3",
}


def small_config(out_dir, **extra):
    overrides = dict(SMALL, out_dir=str(out_dir))
    overrides.update({k: str(v) for k, v in extra.items()})
    return load_config(overrides=overrides)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    cfg = small_config(tmp_path_factory.mktemp("pipe") / "run")
    return cfg, run_pipeline(cfg)


def test_full_run_covers_every_stage(full_run):
    _, res = full_run
    assert res.stages_run == STAGE_ORDER
    assert res.stages_reused == []


def test_stage_files_exist(full_run):
    _, res = full_run
    names = os.listdir(res.out_dir)
    for required in ["manifest.json", "clients.csv", "world.fdeo", "model.fdeo",
                     "synthetic_feddeo.csv", "clf_feddeo.fdeo", "results.csv",
                     "kl.csv", "ledger.csv", "summary.json"]:
        assert required in names, f"missing {required}"
    assert any(n.startswith("upload_c") and n.endswith(".fdup") for n in names)
    assert any(n.startswith("fig_") and n.endswith(".png") for n in names)


def test_result_covers_all_methods(full_run):
    _, res = full_run
    assert [t.method for t in res.tables] == ["feddeo", "prompts_only", "ceiling", "fedavg"]
    for table in res.tables:
        assert set(table.per_client) == {0, 1}
        assert 0.0 <= table.average <= 1.0
    assert set(res.summary["accuracy"]) == {"feddeo", "prompts_only", "ceiling", "fedavg"}
    assert res.summary["ledger"]["feddeo"]["rounds"] == 1
    assert res.ledger.total_bytes("feddeo") == 4 * res.ledger.total_parameters("feddeo")


def test_rerun_reuses_every_stage(full_run):
    cfg, res = full_run
    again = run_pipeline(cfg)
    assert again.stages_run == []
    assert again.stages_reused == STAGE_ORDER
    # a reused evaluate stage still repopulates the result from its files
    assert [t.method for t in again.tables] == [t.method for t in res.tables]
    for a, b in zip(again.tables, res.tables):
        assert a.per_client == b.per_client
    assert again.ledger.total_bytes("feddeo") == res.ledger.total_bytes("feddeo")
    assert len(again.kl_rows) == len(res.kl_rows)
    assert again.summary["results_digest"] == res.summary["results_digest"]


def test_report_reruns_when_a_figure_is_missing(full_run):
    cfg, res = full_run
    os.remove(os.path.join(res.out_dir, "fig_accuracy.png"))
    again = run_pipeline(cfg, only="report")
    assert again.stages_run == ["report"]
    assert again.stages_reused == ["partition"]
    assert os.path.exists(os.path.join(res.out_dir, "fig_accuracy.png"))


def test_force_recomputes_fresh_stages(tmp_path):
    cfg = small_config(tmp_path / "run")
    first = run_pipeline(cfg, upto="pretrain")
    assert first.stages_run == ["partition", "pretrain"]
    forced = run_pipeline(cfg, upto="pretrain", force=True)
    assert forced.stages_run == ["partition", "pretrain"]
    assert forced.stages_reused == []


def test_downstream_knob_keeps_upstream_stages(tmp_path):
    cfg = small_config(tmp_path / "run")
    run_pipeline(cfg, upto="generate")
    bumped = small_config(tmp_path / "run", samples_per_pair=8)
    res = run_pipeline(bumped, upto="generate")
    assert res.stages_reused == ["partition", "pretrain", "descriptions"]
    assert res.stages_run == ["generate"]


def test_seed_change_invalidates_everything(tmp_path):
    cfg = small_config(tmp_path / "run")
    run_pipeline(cfg, upto="pretrain")
    res = run_pipeline(small_config(tmp_path / "run", seed=1), upto="pretrain")
    assert res.stages_run == ["partition", "pretrain"]
    assert res.stages_reused == []


def test_upto_stops_early(tmp_path):
    cfg = small_config(tmp_path / "run")
    res = run_pipeline(cfg, upto="partition")
    assert res.stages_run == ["partition"]
    assert not os.path.exists(tmp_path / "run" / "results.csv")


@pytest.mark.parametrize("stage,producer", [
    ("descriptions", "pretrain"),
    ("generate", "pretrain"),
    ("aggregate", "generate"),
    ("evaluate", "train-aggregate"),
    ("report", "evaluate"),
])
def test_only_names_the_missing_producer(tmp_path, stage, producer):
    cfg = small_config(tmp_path / stage)
    with pytest.raises(StageError, match=f"run the {producer} stage first"):
        run_pipeline(cfg, only=stage)


def test_unknown_stage_rejected(tmp_path):
    cfg = small_config(tmp_path / "run")
    with pytest.raises(StageError, match="unknown stage"):
        run_pipeline(cfg, upto="nonsense")
    with pytest.raises(StageError, match="unknown stage"):
        run_pipeline(cfg, only="nonsense")


def test_corrupted_model_checkpoint_refuses(tmp_path):
    cfg = small_config(tmp_path / "run")
    run_pipeline(cfg, upto="descriptions")
    path = tmp_path / "run" / "model.fdeo"
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF  # flip one body byte, digest no longer matches
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError, match="digest mismatch"):
        run_pipeline(cfg, only="generate")


def test_identical_configs_give_byte_identical_results(tmp_path):
    res_a = run_pipeline(small_config(tmp_path / "a"), upto="evaluate")
    res_b = run_pipeline(small_config(tmp_path / "b"), upto="evaluate")
    bytes_a = (tmp_path / "a" / "results.csv").read_bytes()
    bytes_b = (tmp_path / "b" / "results.csv").read_bytes()
    assert bytes_a == bytes_b
    assert res_a.summary["results_digest"] == res_b.summary["results_digest"]


def test_sweep_shares_upstream_stages(tmp_path):
    cfg = small_config(tmp_path / "run")
    rows = run_sweep(cfg, "R", [2, 4])
    assert [v for v, _ in rows] == [2, 4]
    assert "pretrain" in rows[0][1].stages_run
    assert "pretrain" in rows[1][1].stages_reused
    assert "descriptions" in rows[1][1].stages_reused
    assert "generate" in rows[1][1].stages_run


def test_sweep_csv_format(tmp_path):
    cfg = small_config(tmp_path / "run")
    run_sweep(cfg, "R", [2, 4])
    lines = (tmp_path / "run" / "sweep_R.csv").read_text().splitlines()
    assert lines[0] == "kind,value,method,client_id,accuracy"
    body = [line.split(",") for line in lines[1:]]
    assert len(body) == 2 * 4 * 2  # values x methods x clients
    assert {row[0] for row in body} == {"R"}
    assert {row[1] for row in body} == {"2", "4"}
    assert {row[2] for row in body} == {"feddeo", "prompts_only", "ceiling", "fedavg"}
    for row in body:
        assert 0.0 <= float(row[4]) <= 1.0


def test_sweep_rejects_bad_arguments(tmp_path):
    cfg = small_config(tmp_path / "run")
    with pytest.raises(StageError, match="unknown sweep kind"):
        run_sweep(cfg, "Q", [1])
    with pytest.raises(StageError, match="no sweep values"):
        run_sweep(cfg, "R", [])
    with pytest.raises(StageError, match="positive"):
        run_sweep(cfg, "R", [0])
