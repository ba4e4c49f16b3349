"""Evaluation: k-NN KL divergence, accuracy tables, and the communication ledger.

The KL estimator is the k-nearest-neighbor construction for two sample sets:
    D_hat = (d/n) * sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1))
where rho_k is the k-th neighbor distance within p's own samples (self
excluded) and nu_k is the k-th neighbor distance into q's samples. It is
consistent but noisy at small n, and can legitimately go negative.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import numerics as nm
from .client import UploadPayload
from .datagen import ClientDataset
from .server import Classifier, SyntheticDataset


class MetricsError(Exception):
    """Invalid metric inputs (too few samples, mismatched dims, bad ledger rows)."""


@dataclass
class KLEstimate:
    value: float
    estimator: str          # "knn" or "closed_form"
    n_p: int
    n_q: int
    k: int = 0


def estimate_kl(p_samples: np.ndarray, q_samples: np.ndarray, k: int = 5,
                jitter: float = 1e-9) -> KLEstimate:
    """k-NN divergence estimate of KL(p || q) from two sample sets.

    Duplicate points produce zero neighbor distances; those are jittered by
    ``jitter`` (with a warning) rather than crashing, since generated samples
    can collide after quantization.
    """
    p = np.atleast_2d(np.asarray(p_samples, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q_samples, dtype=np.float64))
    if p.shape[1] != q.shape[1]:
        raise MetricsError(f"dimension mismatch: p is {p.shape[1]}-d, q is {q.shape[1]}-d")
    n, d = p.shape
    m = q.shape[0]
    if n <= k or m < k:
        raise MetricsError(f"need more than k={k} samples on each side, got n={n}, m={m}")
    rho = cKDTree(p).query(p, k + 1)[0][:, k]   # k-th neighbor excluding self
    nu = cKDTree(q).query(p, k)[0]
    nu = nu[:, k - 1] if nu.ndim == 2 else nu
    if np.any(rho <= 0.0) or np.any(nu <= 0.0):
        warnings.warn("duplicate points in KL estimate; jittering by 1e-9", stacklevel=2)
        rng = nm.stream(0, "kl-jitter", n, m, d)
        p = p + jitter * rng.normal(size=p.shape)
        q = q + jitter * rng.normal(size=q.shape)
        rho = cKDTree(p).query(p, k + 1)[0][:, k]
        nu = cKDTree(q).query(p, k)[0]
        nu = nu[:, k - 1] if nu.ndim == 2 else nu
        if np.any(rho <= 0.0) or np.any(nu <= 0.0):
            raise MetricsError("sample sets remain degenerate after jitter")
    value = float((d / n) * np.sum(np.log(nu / rho)) + np.log(m / (n - 1)))
    return KLEstimate(value=value, estimator="knn", n_p=n, n_q=m, k=k)


def kl_gaussian(mean_p: np.ndarray, cov_p: np.ndarray, mean_q: np.ndarray,
                cov_q: np.ndarray) -> KLEstimate:
    """Closed-form KL(N_p || N_q) for full-covariance Gaussians."""
    mean_p = np.atleast_1d(np.asarray(mean_p, dtype=np.float64))
    mean_q = np.atleast_1d(np.asarray(mean_q, dtype=np.float64))
    cov_p = np.atleast_2d(np.asarray(cov_p, dtype=np.float64))
    cov_q = np.atleast_2d(np.asarray(cov_q, dtype=np.float64))
    d = mean_p.shape[0]
    if mean_q.shape[0] != d or cov_p.shape != (d, d) or cov_q.shape != (d, d):
        raise MetricsError("mean/cov shapes inconsistent")
    q_inv = np.linalg.inv(cov_q)
    diff = mean_q - mean_p
    _, logdet_p = np.linalg.slogdet(cov_p)
    _, logdet_q = np.linalg.slogdet(cov_q)
    value = 0.5 * (np.trace(q_inv @ cov_p) + diff @ q_inv @ diff - d + logdet_q - logdet_p)
    return KLEstimate(value=float(value), estimator="closed_form", n_p=0, n_q=0)


def client_kl(synthetic: SyntheticDataset, client: ClientDataset, k: int = 5) -> KLEstimate:
    """KL(true_n || synthetic_n) for one client: its test split vs its synthetic rows."""
    rows = synthetic.x[synthetic.source_client == client.client_id]
    if rows.shape[0] == 0:
        raise MetricsError(f"no synthetic rows for client {client.client_id}")
    return estimate_kl(client.test_x, rows, k=k)


# ---------------------------------------------------------------------------
# accuracy


@dataclass
class ResultsTable:
    method: str
    per_client: dict[int, float]
    average: float


def evaluate_classifier(clf: Classifier, clients: list[ClientDataset], method: str) -> ResultsTable:
    """Per-client accuracy on held-out true test splits, plus the unweighted mean."""
    if not clients:
        raise MetricsError("no clients to evaluate")
    per_client = {}
    for c in clients:
        pred = clf.predict(c.test_x)
        per_client[c.client_id] = float(np.mean(pred == c.test_y))
    return ResultsTable(method=method, per_client=per_client,
                        average=float(np.mean(list(per_client.values()))))


def results_to_csv(path, tables: list[ResultsTable], config_digest: str, seed: int) -> None:
    """One row per (method, client); the header comment pins config and seed."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config={config_digest} seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["method", "client_id", "accuracy"])
        for table in tables:
            for cid in sorted(table.per_client):
                writer.writerow([table.method, cid, repr(table.per_client[cid])])


def load_results_csv(path) -> list[ResultsTable]:
    rows: dict[str, dict[int, float]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        next(reader)  # header row
        for row in reader:
            method, cid, acc = row[0], int(row[1]), float(row[2])
            if method not in rows:
                rows[method] = {}
                order.append(method)
            rows[method][cid] = acc
    return [ResultsTable(method=m, per_client=rows[m],
                         average=float(np.mean(list(rows[m].values())))) for m in order]


# ---------------------------------------------------------------------------
# communication ledger


@dataclass
class LedgerEntry:
    method: str
    parameter_count: int
    uploaded_bytes: int
    rounds: int


@dataclass
class CommLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, method: str, parameter_count: int, uploaded_bytes: int, rounds: int) -> None:
        if parameter_count < 0 or uploaded_bytes < 0 or rounds < 0:
            raise MetricsError("ledger entries must be non-negative")
        self.entries.append(LedgerEntry(method, int(parameter_count), int(uploaded_bytes), int(rounds)))

    def total_bytes(self, method: str) -> int:
        return sum(e.uploaded_bytes for e in self.entries if e.method == method)

    def total_parameters(self, method: str) -> int:
        return sum(e.parameter_count for e in self.entries if e.method == method)

    def ratio(self, method_a: str, method_b: str) -> float:
        b = self.total_bytes(method_b)
        if b == 0:
            raise MetricsError(f"method {method_b!r} uploaded zero bytes; ratio undefined")
        return self.total_bytes(method_a) / b


def ledger_for_run(payloads: list[UploadPayload], clients: list[ClientDataset],
                   classifier_params: int, fedavg_rounds: int,
                   methods: list[str]) -> CommLedger:
    """Uploaded-parameter accounting per method, f32 wire width throughout.

    feddeo uploads the description floats once; prompts_only uploads nothing;
    ceiling uploads every train sample; fedavg uploads the classifier every
    round from every client.
    """
    ledger = CommLedger()
    if "feddeo" in methods:
        count = sum(p.parameter_count for p in payloads)
        ledger.record("feddeo", count, count * 4, 1)
    if "prompts_only" in methods:
        ledger.record("prompts_only", 0, 0, 0)
    if "ceiling" in methods:
        count = sum(c.train_x.size for c in clients)
        ledger.record("ceiling", count, count * 4, 1)
    if "fedavg" in methods:
        count = fedavg_rounds * len(clients) * classifier_params
        ledger.record("fedavg", count, count * 4, fedavg_rounds)
    return ledger


def ledger_to_csv(path, ledger: CommLedger) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "parameter_count", "uploaded_bytes", "rounds"])
        for e in ledger.entries:
            writer.writerow([e.method, e.parameter_count, e.uploaded_bytes, e.rounds])


def load_ledger_csv(path) -> CommLedger:
    ledger = CommLedger()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            ledger.record(row[0], int(row[1]), int(row[2]), int(row[3]))
    return ledger


# ---------------------------------------------------------------------------
# description-epochs ablation on divergence


def kl_vs_training(model, sched, client: ClientDataset, epoch_values: list[int],
                   samples_per_pair: int = 30, seed: int = 0,
                   learning_rate: float = 1e-2, batch_size: int = 64,
                   weights: tuple[float, float] = (1.0, 1.0), k: int = 5) -> list[KLEstimate]:
    """KL(true || synthetic) for one client as description epochs grow.

    Each entry retrains from the class-embedding init for that epoch count, so
    the values are comparable (same seeds, same generation streams).
    """
    from .client import init_descriptions, package_upload, train_descriptions
    from .server import generate_synthetic

    out = []
    for s in epoch_values:
        state = init_descriptions(client, model)
        if s > 0:
            train_descriptions(state, model, sched, epochs=s, learning_rate=learning_rate,
                               batch_size=batch_size, seed=seed)
        payload = package_upload(state, model_digest=model.frozen_digest)
        synth = generate_synthetic(model, sched, [payload], samples_per_pair=samples_per_pair,
                                   seed=seed, weights=weights)
        out.append(client_kl(synth, client, k=k))
    return out
