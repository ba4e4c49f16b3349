"""Acceptance gate: ten numbered criteria, one visible pass/fail line each.

Criteria 5-8 share two full-default pipeline runs (feature skew and label
skew) plus the two ablation sweeps, so this file takes a few minutes; the
rest of the suite stays fast. Every expected value was frozen from seeded
runs; nothing here is tuned at test time.
"""

import numpy as np
import pytest
from scipy.stats import spearmanr

from feddeo import numerics as nm
from feddeo.client import init_descriptions, package_upload, train_descriptions
from feddeo.config import load_config
from feddeo.datagen import make_world, partition_feature_skew
from feddeo.diffusion import (
    IntegrityError,
    NoisePredictor,
    ddim_step,
    forward_noise,
    freeze,
    make_schedule,
    model_digest,
    predict_noise,
    pretrain_dm,
)
from feddeo.metrics import CommLedger, estimate_kl, kl_gaussian
from feddeo.numerics import gradient_check
from feddeo.pipeline import run_pipeline, run_sweep
from feddeo.server import generate_synthetic
from tests.test_numerics import _random_graph


@pytest.fixture
def announce(capsys):
    """One always-visible line per criterion, then the actual assertion."""
    def _announce(num, passed, detail):
        with capsys.disabled():
            print(f"\n[criterion {num:02d}] {'PASS' if passed else 'FAIL'}: {detail}")
        assert passed, f"criterion {num} failed: {detail}"
    return _announce


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "feature_skew"
    cfg = load_config(overrides={"out_dir": str(out)})
    return run_pipeline(cfg, upto="evaluate")


@pytest.fixture(scope="module")
def label_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "label_skew"
    cfg = load_config(overrides={"partition": "label_skew", "out_dir": str(out)})
    return run_pipeline(cfg, upto="evaluate")


@pytest.fixture(scope="module")
def sweep_means(default_run):
    """Mean aggregated accuracy per swept value; shares the default run's cache."""
    curves = {}
    for kind, values in (("R", [10, 30, 50]), ("S", [1, 10, 20])):
        rows = run_sweep(default_run.config, kind, values)
        curves[kind] = (values, [res.summary["accuracy"]["feddeo"] for _, res in rows])
    return curves


def test_01_autodiff_matches_finite_differences(announce):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        graph, inputs = _random_graph(rng)
        report = gradient_check(graph, inputs, tolerance=1e-4)
        worst = max(worst, report.max_rel_error)
    announce(1, worst < 1e-4,
             f"max relative error {worst:.2e} over 100 random graphs (tolerance 1e-4)")


def test_02_pretrained_denoiser_matches_analytic_optimum(announce):
    # for x0 ~ N(0, I) the optimal prediction is E[eps | x_t] = sqrt(1 - ab_t) x_t
    rng = np.random.default_rng(21)
    X = rng.normal(size=(3000, 2))
    model = NoisePredictor(data_dim=2, n_classes=1, hidden=64, depth=2, seed=21)
    sched = make_schedule()
    pretrain_dm(model, sched, (X, np.zeros(3000, dtype=int)), epochs=60,
                learning_rate=2e-3, batch_size=256, seed=21)
    grid = np.stack(np.meshgrid(np.linspace(-2, 2, 9), np.linspace(-2, 2, 9)), -1).reshape(-1, 2)
    z = model.standardize(grid)
    fc = model.class_condition(0)
    worst = max(
        float(np.mean((predict_noise(model, z, t, fc)
                       - np.sqrt(1.0 - sched.alpha_bar[t]) * z) ** 2))
        for t in (20, 80, 140, 200))
    announce(2, worst < 0.05, f"worst grid MSD {worst:.4f} (tolerance 0.05)")


def test_03_deterministic_reverse_step_identity(announce):
    # with the true noise and sigma = 0, one reverse step lands exactly on
    # sqrt(ab[t-1]) x0 + sqrt(1 - ab[t-1]) eps
    sched = make_schedule()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        t = int(rng.integers(1, sched.T + 1))
        x0 = rng.normal(size=(1, 3))
        eps = rng.normal(size=(1, 3))
        x_t = forward_noise(x0, eps, t, sched)
        got = ddim_step(x_t, eps, t, sched)
        want = np.sqrt(sched.alpha_bar[t - 1]) * x0 + np.sqrt(1.0 - sched.alpha_bar[t - 1]) * eps
        worst = max(worst, float(np.abs(got - want).max()))
    announce(3, worst < 1e-10, f"max deviation {worst:.2e} over 1000 draws (tolerance 1e-10)")


def test_04_description_training_cannot_touch_the_frozen_model(announce):
    world = make_world(n_categories=3, n_domains=2, seed=4)
    client = partition_feature_skew(world, 1, train_per_class=30, test_per_class=10, seed=4)[0]
    model = NoisePredictor(data_dim=2, n_classes=3, cond_dim=8, hidden=24,
                           depth=2, time_dim=8, seed=4)
    sched = make_schedule(T=40)
    pretrain_dm(model, sched, (client.train_x, client.train_y), epochs=2, seed=4)
    digest_before = freeze(model)

    state = init_descriptions(client, model)
    train_descriptions(state, model, sched, epochs=2, seed=4)
    unchanged = model_digest(model) == digest_before == model.frozen_digest

    stale = package_upload(state, model_digest="0" * 64)
    with pytest.raises(IntegrityError):
        generate_synthetic(model, sched, [stale], samples_per_pair=2)
    announce(4, unchanged,
             "model digest byte-identical after client training; "
             "stale-digest payload refused")


def test_05_description_guidance_beats_prompts_on_per_client_kl(announce, default_run):
    per = {"feddeo": {}, "prompts_only": {}}
    for method, cid, est in default_run.kl_rows:
        per[method][cid] = est.value
    wins = sum(1 for cid in per["feddeo"] if per["feddeo"][cid] < per["prompts_only"][cid])
    total = len(per["feddeo"])
    mean_f = float(np.mean(list(per["feddeo"].values())))
    mean_p = float(np.mean(list(per["prompts_only"].values())))
    reduction = 1.0 - mean_f / mean_p
    ok = wins >= 5 and total == 6 and reduction >= 0.20
    announce(5, ok,
             f"{wins}/{total} clients lower KL(test || synthetic) with trained "
             f"descriptions; means {mean_f:+.3f} vs {mean_p:.3f} "
             f"(reduction {reduction:.0%}, required >= 20%)")


def test_06_accuracy_ordering(announce, default_run, label_run):
    acc_f = default_run.summary["accuracy"]
    acc_l = label_run.summary["accuracy"]
    margin_f = acc_f["feddeo"] - acc_f["prompts_only"]
    margin_l = acc_l["feddeo"] - acc_l["prompts_only"]
    gap_f = acc_f["ceiling"] - acc_f["feddeo"]
    gap_l = acc_l["ceiling"] - acc_l["feddeo"]
    ok = margin_f >= 0.03 and margin_l >= 0.03 and gap_f <= 0.10
    announce(6, ok,
             f"margin over prompts: feature skew +{margin_f:.3f}, label skew "
             f"+{margin_l:.3f} (>= 0.03 both); ceiling gap {gap_f:.3f} on the "
             f"default benchmark (<= 0.10; label-skew gap {gap_l:.3f} reported "
             "unasserted: one description per category cannot span six domains)")


def test_07_accuracy_rises_with_generation_and_training_budget(announce, sweep_means):
    details = []
    ok = True
    for kind in ("R", "S"):
        values, means = sweep_means[kind]
        rho = float(spearmanr(values, means).statistic)
        ok = ok and rho > 0.0
        curve = ", ".join(f"{kind}={v}: {m:.4f}" for v, m in zip(values, means))
        details.append(f"{curve} (spearman {rho:+.2f})")
    announce(7, ok, "; ".join(details))


def test_08_communication_ledger(announce, default_run):
    cfg = default_run.config
    ledger = default_run.summary["ledger"]
    want_params = cfg.clients * cfg.categories * cfg.cond_dim
    got = ledger["feddeo"]
    ok = (got["parameters"] == want_params == 960
          and got["rounds"] == 1
          and got["bytes"] < ledger["fedavg"]["bytes"])

    # image-scale reference deployment: 6 clients x 10 categories, descriptions
    # stored as 77 prompt-token embeddings of width 768, against 20 FedAvg
    # rounds of an 11.69M-parameter backbone -> roughly 66x more upload
    reference = CommLedger()
    reference.record("feddeo", 60 * 77 * 768, 60 * 77 * 768 * 4, 1)
    reference.record("fedavg", 20 * 11_690_000, 20 * 11_690_000 * 4, 20)
    ratio = reference.ratio("fedavg", "feddeo")
    headline = 233.8 / 3.54  # the same budgets quoted in millions of parameters
    ok = ok and abs(ratio - 66.0) <= 1.0 and abs(headline - 66.0) <= 1.0
    announce(8, ok,
             f"default run uploads {got['parameters']} parameters "
             f"({got['bytes']} bytes, 1 round) vs fedavg {ledger['fedavg']['bytes']} bytes; "
             f"image-scale reference ratio {ratio:.1f}x (expected about 66x)")


def test_09_identical_runs_are_byte_identical(announce, tmp_path):
    shrink = {"pretrain_epochs": "30", "pretrain_per_mode": "60",
              "train_per_class": "60", "test_per_class": "40",
              "description_epochs": "4", "samples_per_pair": "10",
              "classifier_epochs": "60", "fedavg_rounds": "5"}
    digests = []
    bodies = []
    for name in ("first", "second"):
        cfg = load_config(overrides=dict(shrink, out_dir=str(tmp_path / name)))
        res = run_pipeline(cfg)
        digests.append(res.summary["results_digest"])
        bodies.append((tmp_path / name / "results.csv").read_bytes())
    ok = bodies[0] == bodies[1] and digests[0] == digests[1]
    announce(9, ok, f"two fresh runs agree: results.csv {len(bodies[0])} bytes "
             f"byte-identical, summary digest {digests[0][:12]}")


def test_10_kl_estimator_calibration(announce):
    rng = np.random.default_rng(20240815)
    n = 2000
    pairs = [
        ("same distribution", rng.normal(size=(n, 1)), rng.normal(size=(n, 1)), 0.0),
        ("unit mean shift", rng.normal(size=(n, 1)), rng.normal(size=(n, 1)) + 1.0, 0.5),
        ("shift sqrt(5), stdev 2", rng.normal(size=(n, 1)),
         2.0 * rng.normal(size=(n, 1)) + np.sqrt(5.0), 0.25 + np.log(2.0)),
    ]
    closed = kl_gaussian(np.zeros(1), np.eye(1), np.array([np.sqrt(5.0)]), np.array([[4.0]]))
    assert closed.value == pytest.approx(0.25 + np.log(2.0), abs=1e-12)
    details = []
    ok = True
    for tag, p, q, want in pairs:
        est = estimate_kl(p, q, k=5)
        err = abs(est.value - want)
        ok = ok and err <= 0.1
        details.append(f"{tag}: {est.value:+.3f} vs {want:.3f}")
    announce(10, ok, "; ".join(details) + " (tolerance 0.1 nats, n=2000)")
