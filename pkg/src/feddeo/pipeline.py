"""Staged experiment pipeline with content-addressed stage reuse.

Stages communicate only through files in the output directory (checkpoints,
payloads, CSVs), and a manifest records a key per stage derived from the
config fields that stage actually depends on. Rerunning with an unchanged
config reuses everything that exists; changing one knob invalidates exactly
the stages downstream of it. Fresh runs and resumed runs produce identical
outputs because consumers always read their inputs back from files.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .checkpoint import (
    load_classifier,
    load_model,
    save_checkpoint,
    save_classifier,
    save_model,
)
from .client import init_descriptions, package_upload, parse_upload, train_descriptions
from .config import ExperimentConfig, config_digest, parse_baselines
from .datagen import (
    export_clients_csv,
    load_clients_csv,
    make_world,
    partition_feature_skew,
    partition_label_skew,
)
from .diffusion import freeze, make_schedule
from .metrics import (
    CommLedger,
    KLEstimate,
    ResultsTable,
    estimate_kl,
    evaluate_classifier,
    ledger_for_run,
    ledger_to_csv,
    results_to_csv,
)
from .server import (
    export_synthetic_csv,
    generate_prompts_only,
    generate_synthetic,
    load_synthetic_csv,
    train_aggregated,
    train_centralized,
    train_classifier,
    train_fedavg,
)


class StageError(Exception):
    """A stage failed or its inputs are missing; names the stage to run."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


STAGE_ORDER = ["partition", "pretrain", "descriptions", "generate", "aggregate",
               "evaluate", "report"]

# config fields each stage's output depends on; parents chain transitively
_WORLD_FIELDS = ["categories", "domains", "dim", "sigma", "category_radius", "domain_radius",
                 "rotation_step", "scale_spread", "components", "component_spread",
                 "mean_jitter", "min_separation"]
_STAGE_FIELDS = {
    "partition": ["seed", "partition", "clients", "train_per_class", "test_per_class"] + _WORLD_FIELDS,
    "pretrain": ["seed", "timesteps", "beta_min", "beta_max", "eta", "model_hidden",
                 "model_depth", "time_dim", "cond_dim", "pretrain_epochs", "pretrain_lr",
                 "pretrain_batch", "pretrain_per_mode", "cond_jitter",
                 "context_scale", "context_dropout"] + _WORLD_FIELDS,
    "descriptions": ["description_epochs", "description_lr", "description_batch"],
    "generate": ["samples_per_pair", "weight_description", "weight_class"],
    "aggregate": ["baselines", "samples_per_pair", "classifier_hidden", "classifier_depth",
                  "classifier_epochs", "classifier_lr", "classifier_batch",
                  "convergence_tol", "convergence_patience", "fedavg_rounds",
                  "fedavg_local_epochs"],
    "evaluate": ["kl_neighbors"],
    "report": [],
}
_STAGE_PARENTS = {
    "partition": [],
    "pretrain": [],
    "descriptions": ["partition", "pretrain"],
    "generate": ["descriptions"],
    "aggregate": ["partition", "pretrain", "generate"],
    "evaluate": ["partition", "generate", "aggregate"],
    "report": ["evaluate"],
}


def stage_key(name: str, cfg: ExperimentConfig, parent_keys: dict[str, str]) -> str:
    text = [f"{f}={getattr(cfg, f)!r}" for f in _STAGE_FIELDS[name]]
    text += [f"parent:{p}={parent_keys[p]}" for p in _STAGE_PARENTS[name]]
    return hashlib.sha256("\n".join(text).encode("utf-8")).hexdigest()[:12]


@dataclass
class PipelineResult:
    config: ExperimentConfig
    digest: str
    out_dir: str
    tables: list[ResultsTable] = field(default_factory=list)
    kl_rows: list[tuple[str, int, KLEstimate]] = field(default_factory=list)
    ledger: CommLedger | None = None
    summary: dict = field(default_factory=dict)
    stages_run: list[str] = field(default_factory=list)
    stages_reused: list[str] = field(default_factory=list)


class _Manifest:
    """Stage bookkeeping persisted as JSON next to the artifacts."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, "manifest.json")
        self.data = {"stages": {}}
        if os.path.exists(self.path):
            with open(self.path) as fh:
                self.data = json.load(fh)

    def fresh(self, out_dir: str, name: str, key: str) -> bool:
        entry = self.data["stages"].get(name)
        if not entry or entry["key"] != key:
            return False
        return all(os.path.exists(os.path.join(out_dir, f)) for f in entry["files"])

    def record(self, name: str, key: str, files: list[str], info: dict | None = None) -> None:
        self.data["stages"][name] = {"key": key, "files": files, "info": info or {}}
        tmp = self.path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.path)

    def info(self, name: str) -> dict:
        return self.data["stages"].get(name, {}).get("info", {})


def _world_from_cfg(cfg: ExperimentConfig):
    return make_world(
        n_categories=cfg.categories, n_domains=cfg.domains, dim=cfg.dim, sigma=cfg.sigma,
        category_radius=cfg.category_radius, domain_radius=cfg.domain_radius,
        rotation_step=cfg.rotation_step, scale_spread=cfg.scale_spread,
        components=cfg.components, component_spread=cfg.component_spread,
        mean_jitter=cfg.mean_jitter, min_separation=cfg.min_separation, seed=cfg.seed)


def _world_arrays(world) -> tuple[dict, dict]:
    arrays, scalars = {}, {"n_categories": world.n_categories, "n_domains": world.n_domains,
                           "dim": world.dim, "seed": world.seed}
    for c, cat in enumerate(world.categories):
        for j, comp in enumerate(cat):
            arrays[f"cat{c:02d}/comp{j:02d}/mean"] = comp.mean
            arrays[f"cat{c:02d}/comp{j:02d}/cov"] = comp.cov
            scalars[f"cat{c:02d}/comp{j:02d}/weight"] = comp.weight
    for k, dom in enumerate(world.domains):
        arrays[f"dom{k:02d}/translation"] = dom.translation
        scalars[f"dom{k:02d}/rotation"] = dom.rotation
        scalars[f"dom{k:02d}/scale"] = dom.scale
    return arrays, scalars


# ---------------------------------------------------------------------------
# stage bodies


def _run_partition(cfg: ExperimentConfig, out: str) -> list[str]:
    world = _world_from_cfg(cfg)
    if cfg.partition == "feature_skew":
        clients = partition_feature_skew(world, cfg.clients, cfg.train_per_class,
                                         cfg.test_per_class, seed=cfg.seed)
    else:
        clients = partition_label_skew(world, cfg.clients, cfg.train_per_class,
                                       cfg.test_per_class, seed=cfg.seed)
    export_clients_csv(os.path.join(out, "clients.csv"), clients)
    arrays, scalars = _world_arrays(world)
    save_checkpoint(os.path.join(out, "world.fdeo"), arrays, scalars)
    return ["clients.csv", "world.fdeo"]


def _run_pretrain(cfg: ExperimentConfig, out: str) -> tuple[list[str], dict]:
    world = _world_from_cfg(cfg)
    xs, ys, centers = [], [], []
    for k in range(world.n_domains):
        for c in range(world.n_categories):
            rng = nm.stream(cfg.seed, "pretrain-data", k, c)
            xs.append(world.sample_pair(k, c, cfg.pretrain_per_mode, rng))
            ys.append(np.full(cfg.pretrain_per_mode, c, dtype=np.int64))
            mean = sum(comp.weight * world.component_under(k, comp)[0]
                       for comp in world.categories[c])
            centers.append(np.tile(mean, (cfg.pretrain_per_mode, 1)))
    X, y = np.vstack(xs), np.concatenate(ys)
    from .diffusion import NoisePredictor, pretrain_dm
    sched = make_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max, cfg.eta)
    model = NoisePredictor(data_dim=cfg.dim, n_classes=cfg.categories, cond_dim=cfg.cond_dim,
                           hidden=cfg.model_hidden, depth=cfg.model_depth,
                           time_dim=cfg.time_dim, seed=cfg.seed,
                           context_scale=cfg.context_scale)
    # each corpus sample is annotated with a coarse location tag: the class
    # embedding plus the projected center of the mode it came from, so the
    # condition space learns to express where a distribution lives, not just
    # which class it is
    conditions = model.class_embeddings.data[y] + np.vstack(centers) @ model.context_projection
    losses = pretrain_dm(model, sched, (X, y), epochs=cfg.pretrain_epochs,
                         learning_rate=cfg.pretrain_lr, batch_size=cfg.pretrain_batch,
                         seed=cfg.seed, cond_jitter=cfg.cond_jitter,
                         conditions=conditions, condition_dropout=cfg.context_dropout)
    save_model(os.path.join(out, "model.fdeo"), model, sched)
    with open(os.path.join(out, "pretrain_losses.json"), "w") as fh:
        json.dump(losses, fh)
        fh.write("\n")
    return ["model.fdeo", "pretrain_losses.json"], {"final_loss": losses[-1]}


def _frozen_model(out: str, stage: str):
    path = os.path.join(out, "model.fdeo")
    if not os.path.exists(path):
        raise StageError(stage, "no pretrained model found; run the pretrain stage first")
    model, sched = load_model(path)
    freeze(model)
    return model, sched


def _load_clients(cfg: ExperimentConfig, out: str, stage: str):
    path = os.path.join(out, "clients.csv")
    if not os.path.exists(path):
        raise StageError(stage, "no client data found; run the partition stage first")
    return load_clients_csv(path)


def _run_descriptions(cfg: ExperimentConfig, out: str) -> tuple[list[str], dict]:
    model, sched = _frozen_model(out, "descriptions")
    clients = _load_clients(cfg, out, "descriptions")
    files = []
    losses = {}
    for ds in clients:
        state = init_descriptions(ds, model)
        trace = train_descriptions(state, model, sched, epochs=cfg.description_epochs,
                                   learning_rate=cfg.description_lr,
                                   batch_size=cfg.description_batch, seed=cfg.seed)
        payload = package_upload(state, model_digest=model.frozen_digest)
        name = f"upload_c{ds.client_id}.fdup"
        with open(os.path.join(out, name), "wb") as fh:
            fh.write(payload.to_bytes())
        files.append(name)
        losses[str(ds.client_id)] = trace
    info = {"model_digest": model.frozen_digest, "losses": losses}
    with open(os.path.join(out, "description_losses.json"), "w") as fh:
        json.dump(losses, fh)
        fh.write("\n")
    files.append("description_losses.json")
    return files, info


def _load_payloads(out: str, manifest: _Manifest, stage: str):
    info = manifest.info("descriptions")
    digest = info.get("model_digest")
    if digest is None:
        raise StageError(stage, "no uploads found; run the train-descriptions stage first")
    payloads = []
    for name in manifest.data["stages"]["descriptions"]["files"]:
        if not name.endswith(".fdup"):
            continue
        path = os.path.join(out, name)
        if not os.path.exists(path):
            raise StageError(stage, f"upload {name} missing; run the train-descriptions stage first")
        with open(path, "rb") as fh:
            payloads.append(parse_upload(fh.read(), model_digest=digest))
    if not payloads:
        raise StageError(stage, "no uploads found; run the train-descriptions stage first")
    return payloads


def _run_generate(cfg: ExperimentConfig, out: str, manifest: _Manifest) -> tuple[list[str], dict]:
    model, sched = _frozen_model(out, "generate")
    payloads = _load_payloads(out, manifest, "generate")
    synth = generate_synthetic(model, sched, payloads, samples_per_pair=cfg.samples_per_pair,
                               seed=cfg.seed,
                               weights=(cfg.weight_description, cfg.weight_class))
    export_synthetic_csv(os.path.join(out, "synthetic_feddeo.csv"), synth)
    return ["synthetic_feddeo.csv"], {"rows": len(synth), "model_digest": synth.model_digest}


def _classifier_kwargs(cfg: ExperimentConfig) -> dict:
    return dict(hidden=cfg.classifier_hidden, depth=cfg.classifier_depth,
                epochs=cfg.classifier_epochs, learning_rate=cfg.classifier_lr,
                batch_size=cfg.classifier_batch, seed=cfg.seed,
                convergence_tol=cfg.convergence_tol,
                convergence_patience=cfg.convergence_patience)


def _run_aggregate(cfg: ExperimentConfig, out: str, manifest: _Manifest) -> tuple[list[str], dict]:
    synth_path = os.path.join(out, "synthetic_feddeo.csv")
    if not os.path.exists(synth_path):
        raise StageError("aggregate", "no synthetic data found; run the generate stage first")
    gen_info = manifest.info("generate")
    synth = load_synthetic_csv(synth_path, model_digest=gen_info.get("model_digest", ""))
    clients = _load_clients(cfg, out, "aggregate")
    files, losses = [], {}

    clf, trace = train_aggregated(synth, cfg.categories, **_classifier_kwargs(cfg))
    save_classifier(os.path.join(out, "clf_feddeo.fdeo"), clf)
    files.append("clf_feddeo.fdeo")
    losses["feddeo"] = trace

    enabled = parse_baselines(cfg)
    if "prompts_only" in enabled:
        model, sched = _frozen_model(out, "aggregate")
        prompts = generate_prompts_only(model, sched, samples_per_class=cfg.samples_per_pair,
                                        seed=cfg.seed)
        export_synthetic_csv(os.path.join(out, "synthetic_prompts.csv"), prompts)
        files.append("synthetic_prompts.csv")
        pclf, ptrace = train_classifier(prompts.x, prompts.y, cfg.categories,
                                        **_classifier_kwargs(cfg))
        save_classifier(os.path.join(out, "clf_prompts_only.fdeo"), pclf)
        files.append("clf_prompts_only.fdeo")
        losses["prompts_only"] = ptrace
    if "ceiling" in enabled:
        cclf, ctrace = train_centralized(clients, cfg.categories, **_classifier_kwargs(cfg))
        save_classifier(os.path.join(out, "clf_ceiling.fdeo"), cclf)
        files.append("clf_ceiling.fdeo")
        losses["ceiling"] = ctrace
    if "fedavg" in enabled:
        fclf, ftrace = train_fedavg(clients, cfg.categories, rounds=cfg.fedavg_rounds,
                                    local_epochs=cfg.fedavg_local_epochs,
                                    hidden=cfg.classifier_hidden, depth=cfg.classifier_depth,
                                    learning_rate=cfg.classifier_lr,
                                    batch_size=cfg.classifier_batch, seed=cfg.seed)
        save_classifier(os.path.join(out, "clf_fedavg.fdeo"), fclf)
        files.append("clf_fedavg.fdeo")
        losses["fedavg"] = ftrace

    with open(os.path.join(out, "classifier_losses.json"), "w") as fh:
        json.dump(losses, fh)
        fh.write("\n")
    files.append("classifier_losses.json")
    return files, {"methods": ["feddeo"] + enabled}


def _run_evaluate(cfg: ExperimentConfig, out: str, manifest: _Manifest,
                  digest: str) -> tuple[list[str], dict, list[ResultsTable],
                                        list[tuple[str, int, KLEstimate]], CommLedger]:
    clients = _load_clients(cfg, out, "evaluate")
    methods = manifest.info("aggregate").get("methods")
    if not methods:
        raise StageError("evaluate", "no trained classifiers found; run the train-aggregate stage first")
    tables = []
    for method in methods:
        path = os.path.join(out, f"clf_{method}.fdeo")
        if not os.path.exists(path):
            raise StageError("evaluate", f"classifier for {method!r} missing; "
                             "run the train-aggregate stage first")
        tables.append(evaluate_classifier(load_classifier(path), clients, method))

    kl_rows: list[tuple[str, int, KLEstimate]] = []
    synth = load_synthetic_csv(os.path.join(out, "synthetic_feddeo.csv"))
    for c in clients:
        rows = synth.x[synth.source_client == c.client_id]
        kl_rows.append(("feddeo", c.client_id,
                        estimate_kl(c.test_x, rows, k=cfg.kl_neighbors)))
    prompts_path = os.path.join(out, "synthetic_prompts.csv")
    if os.path.exists(prompts_path):
        prompts = load_synthetic_csv(prompts_path)
        for c in clients:
            kl_rows.append(("prompts_only", c.client_id,
                            estimate_kl(c.test_x, prompts.x, k=cfg.kl_neighbors)))

    payloads = _load_payloads(out, manifest, "evaluate")
    clf_params = load_classifier(os.path.join(out, "clf_feddeo.fdeo")).parameter_count
    ledger = ledger_for_run(payloads, clients, clf_params, cfg.fedavg_rounds,
                            methods=["feddeo"] + [m for m in methods if m != "feddeo"])

    results_path = os.path.join(out, "results.csv")
    results_to_csv(results_path, tables, digest, cfg.seed)
    ledger_to_csv(os.path.join(out, "ledger.csv"), ledger)
    with open(os.path.join(out, "kl.csv"), "w", newline="") as fh:
        fh.write("method,client_id,kl_value,n_p,n_q,k\n")
        for method, cid, est in kl_rows:
            fh.write(f"{method},{cid},{est.value!r},{est.n_p},{est.n_q},{est.k}\n")

    with open(results_path, "rb") as fh:
        results_digest = hashlib.sha256(fh.read()).hexdigest()
    kl_means = {}
    for method in ("feddeo", "prompts_only"):
        vals = [e.value for m, _, e in kl_rows if m == method]
        if vals:
            kl_means[method] = float(np.mean(vals))
    summary = {
        "config": digest,
        "seed": cfg.seed,
        "partition": cfg.partition,
        "accuracy": {t.method: t.average for t in tables},
        "per_client": {t.method: {str(k): v for k, v in sorted(t.per_client.items())}
                       for t in tables},
        "kl_mean": kl_means,
        "ledger": {e.method: {"parameters": e.parameter_count, "bytes": e.uploaded_bytes,
                              "rounds": e.rounds} for e in ledger.entries},
        "classifier_parameters": clf_params,
        "results_digest": results_digest,
    }
    if "feddeo" in kl_means and "prompts_only" in kl_means and kl_means["prompts_only"] != 0:
        summary["kl_reduction"] = 1.0 - kl_means["feddeo"] / kl_means["prompts_only"]
    if ledger.total_bytes("feddeo"):
        for method in ("fedavg", "ceiling"):
            if ledger.total_bytes(method):
                summary[f"comm_ratio_{method}_over_feddeo"] = ledger.ratio(method, "feddeo")
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    files = ["results.csv", "ledger.csv", "kl.csv", "summary.json"]
    return files, {"results_digest": results_digest}, tables, kl_rows, ledger


def _run_report(cfg: ExperimentConfig, out: str, manifest: _Manifest) -> list[str]:
    if not os.path.exists(os.path.join(out, "results.csv")):
        raise StageError("report", "no results found; run the evaluate stage first")
    from . import report
    return report.render_all(cfg, out)


# ---------------------------------------------------------------------------
# driver


def run_pipeline(cfg: ExperimentConfig, upto: str | None = None,
                 only: str | None = None, force: bool = False) -> PipelineResult:
    """Run stages in order, reusing any stage whose key matches the manifest.

    ``upto`` stops after the named stage; ``only`` runs a single stage (its
    inputs must already exist, except the cheap partition stage, which is
    recomputed on demand). IntegrityError and format errors propagate as-is;
    other stage failures are wrapped in StageError.
    """
    if upto is not None and upto not in STAGE_ORDER:
        raise StageError(upto, f"unknown stage; expected one of {STAGE_ORDER}")
    if only is not None and only not in STAGE_ORDER:
        raise StageError(only, f"unknown stage; expected one of {STAGE_ORDER}")
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    manifest = _Manifest(out)
    digest = config_digest(cfg)
    result = PipelineResult(config=cfg, digest=digest, out_dir=out)

    keys: dict[str, str] = {}
    for name in STAGE_ORDER:
        keys[name] = stage_key(name, cfg, keys)

    if only is not None:
        wanted = ["partition", only] if only != "partition" else ["partition"]
    else:
        stop = STAGE_ORDER.index(upto) if upto else len(STAGE_ORDER) - 1
        wanted = STAGE_ORDER[:stop + 1]

    for name in wanted:
        if not force and manifest.fresh(out, name, keys[name]):
            result.stages_reused.append(name)
            if name == "evaluate":
                _load_eval_outputs(cfg, out, result)
            continue
        try:
            if name == "partition":
                files, info = _run_partition(cfg, out), {}
            elif name == "pretrain":
                files, info = _run_pretrain(cfg, out)
            elif name == "descriptions":
                files, info = _run_descriptions(cfg, out)
            elif name == "generate":
                files, info = _run_generate(cfg, out, manifest)
            elif name == "aggregate":
                files, info = _run_aggregate(cfg, out, manifest)
            elif name == "evaluate":
                files, info, tables, kl_rows, ledger = _run_evaluate(cfg, out, manifest, digest)
                result.tables, result.kl_rows, result.ledger = tables, kl_rows, ledger
                with open(os.path.join(out, "summary.json")) as fh:
                    result.summary = json.load(fh)
            else:
                files, info = _run_report(cfg, out, manifest), {}
        except StageError:
            raise
        except (KeyboardInterrupt, SystemExit):
            raise
        except Exception as exc:
            from .client import UploadFormatError
            from .checkpoint import CheckpointFormatError
            from .config import ConfigError
            from .diffusion import IntegrityError
            if isinstance(exc, (IntegrityError, CheckpointFormatError, UploadFormatError, ConfigError)):
                raise
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        manifest.record(name, keys[name], files, info)
        result.stages_run.append(name)
    return result


def _load_eval_outputs(cfg: ExperimentConfig, out: str, result: PipelineResult) -> None:
    """Populate the result from a reused evaluate stage's files."""
    from .metrics import load_ledger_csv, load_results_csv
    result.tables = load_results_csv(os.path.join(out, "results.csv"))
    result.ledger = load_ledger_csv(os.path.join(out, "ledger.csv"))
    with open(os.path.join(out, "summary.json")) as fh:
        result.summary = json.load(fh)
    kl_rows = []
    with open(os.path.join(out, "kl.csv")) as fh:
        next(fh)
        for line in fh:
            method, cid, value, n_p, n_q, k = line.strip().split(",")
            kl_rows.append((method, int(cid),
                            KLEstimate(value=float(value), estimator="knn",
                                       n_p=int(n_p), n_q=int(n_q), k=int(k))))
    result.kl_rows = kl_rows


# ---------------------------------------------------------------------------
# ablation sweeps


_SWEEP_FIELDS = {"R": "samples_per_pair", "S": "description_epochs"}


def run_sweep(cfg: ExperimentConfig, kind: str, values: list[int]) -> list[tuple[int, PipelineResult]]:
    """Rerun the pipeline for each value of R (samples per pair) or S (description epochs).

    All runs share the output directory, so stages upstream of the swept knob
    (notably pretraining) are computed once and reused.
    """
    if kind not in _SWEEP_FIELDS:
        raise StageError("sweep", f"unknown sweep kind {kind!r}; expected one of {sorted(_SWEEP_FIELDS)}")
    if not values:
        raise StageError("sweep", "no sweep values given")
    out = []
    for v in values:
        if v <= 0:
            raise StageError("sweep", f"sweep values must be positive, got {v}")
        cfg_v = replace(cfg, **{_SWEEP_FIELDS[kind]: int(v)})
        out.append((int(v), run_pipeline(cfg_v, upto="evaluate")))
    _write_sweep_csv(cfg, kind, out)
    return out


def _write_sweep_csv(cfg: ExperimentConfig, kind: str, rows: list[tuple[int, PipelineResult]]) -> None:
    path = os.path.join(cfg.out_dir, f"sweep_{kind}.csv")
    with open(path, "w", newline="") as fh:
        fh.write("kind,value,method,client_id,accuracy\n")
        for value, res in rows:
            for table in res.tables:
                for cid in sorted(table.per_client):
                    fh.write(f"{kind},{value},{table.method},{cid},{table.per_client[cid]!r}\n")
