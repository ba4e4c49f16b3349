"""Server-side work: replay uploaded descriptions into synthetic data, train classifiers.

Generation never touches client samples; it consumes only upload payloads and
the frozen model, and refuses payloads whose recorded model digest does not
match the live model. Baselines live here too: class-embedding-only generation
(prompts only), a centralized ceiling, and multi-round FedAvg.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .client import UploadPayload
from .datagen import ClientDataset
from .diffusion import (
    ConditionVector,
    FrozenModelError,
    IntegrityError,
    NoisePredictor,
    VarianceSchedule,
    sample,
)
from .numerics import Tensor


class ServerError(Exception):
    """Invalid server-side request (empty payloads, label mismatches, and so on)."""


@dataclass
class SyntheticDataset:
    """Generated samples with pseudo-labels and provenance per row."""

    x: np.ndarray
    y: np.ndarray
    source_client: np.ndarray
    replicate: np.ndarray
    model_digest: str

    def __len__(self) -> int:
        return self.x.shape[0]


def generate_synthetic(model: NoisePredictor, sched: VarianceSchedule,
                       payloads: list[UploadPayload], samples_per_pair: int = 30,
                       seed: int = 0, weights: tuple[float, float] = (1.0, 1.0)) -> SyntheticDataset:
    """DDIM-generate ``samples_per_pair`` points per uploaded (client, category) pair.

    Each pair composes its description with the category's class embedding; the
    pseudo-label is the category the description was trained for. Every payload
    must carry the frozen model's digest.
    """
    if not model.frozen:
        raise FrozenModelError("generation requires the frozen model")
    if not payloads:
        raise ServerError("no upload payloads to generate from")
    if samples_per_pair < 1:
        raise ServerError(f"samples_per_pair must be >= 1, got {samples_per_pair}")
    for p in payloads:
        if p.model_digest != model.frozen_digest:
            raise IntegrityError(
                f"client {p.client_id} payload digest {p.model_digest!r} does not match "
                f"the frozen model {model.frozen_digest!r}")
    xs, ys, srcs, reps = [], [], [], []
    for payload in sorted(payloads, key=lambda p: p.client_id):
        for cat, values in sorted(payload.entries, key=lambda e: e[0]):
            desc = ConditionVector(np.asarray(values, dtype=np.float64), "description")
            pts = sample(model, sched, model.class_condition(cat), desc,
                         count=samples_per_pair,
                         seed=nm.stream_seed(seed, "generate", payload.client_id, cat),
                         weights=weights)
            xs.append(pts)
            ys.append(np.full(samples_per_pair, cat, dtype=np.int64))
            srcs.append(np.full(samples_per_pair, payload.client_id, dtype=np.int64))
            reps.append(np.arange(samples_per_pair, dtype=np.int64))
    return SyntheticDataset(x=np.vstack(xs), y=np.concatenate(ys),
                            source_client=np.concatenate(srcs), replicate=np.concatenate(reps),
                            model_digest=model.frozen_digest)


def generate_prompts_only(model: NoisePredictor, sched: VarianceSchedule,
                          samples_per_class: int = 30, seed: int = 0) -> SyntheticDataset:
    """Single-branch generation from class embeddings alone; no client input at all."""
    if not model.frozen:
        raise FrozenModelError("generation requires the frozen model")
    xs, ys, reps = [], [], []
    for cat in range(model.n_classes):
        pts = sample(model, sched, model.class_condition(cat), None,
                     count=samples_per_class,
                     seed=nm.stream_seed(seed, "prompts-only", cat))
        xs.append(pts)
        ys.append(np.full(samples_per_class, cat, dtype=np.int64))
        reps.append(np.arange(samples_per_class, dtype=np.int64))
    return SyntheticDataset(x=np.vstack(xs), y=np.concatenate(ys),
                            source_client=np.full(model.n_classes * samples_per_class, -1,
                                                  dtype=np.int64),
                            replicate=np.concatenate(reps), model_digest=model.frozen_digest)


def export_synthetic_csv(path, data: SyntheticDataset) -> None:
    dim = data.x.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_client", "pseudo_label", "replicate"] + [f"x{i}" for i in range(dim)])
        for i in range(len(data)):
            writer.writerow([int(data.source_client[i]), int(data.y[i]), int(data.replicate[i])]
                            + [repr(float(v)) for v in data.x[i]])


def load_synthetic_csv(path, model_digest: str = "") -> SyntheticDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 3
        rows = list(reader)
    return SyntheticDataset(
        x=np.array([[float(v) for v in r[3:3 + dim]] for r in rows]),
        y=np.array([int(r[1]) for r in rows], dtype=np.int64),
        source_client=np.array([int(r[0]) for r in rows], dtype=np.int64),
        replicate=np.array([int(r[2]) for r in rows], dtype=np.int64),
        model_digest=model_digest)


# ---------------------------------------------------------------------------
# classifier


class Classifier:
    """Small MLP over raw features with softmax output; ties break to the lowest index."""

    def __init__(self, data_dim: int, n_classes: int, hidden: int = 64, depth: int = 2,
                 seed: int = 0):
        self.data_dim = int(data_dim)
        self.n_classes = int(n_classes)
        self.hidden = int(hidden)
        self.depth = int(depth)
        rng = nm.stream(seed, "classifier-init")
        self.params: dict[str, Tensor] = {}
        widths = [data_dim] + [hidden] * depth + [n_classes]
        for i in range(len(widths) - 1):
            w = rng.normal(size=(widths[i], widths[i + 1])) * np.sqrt(2.0 / widths[i])
            self.params[f"w{i}"] = Tensor(w, requires_grad=True, name=f"clf_w{i}")
            self.params[f"b{i}"] = Tensor(np.zeros(widths[i + 1]), requires_grad=True, name=f"clf_b{i}")

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def logits(self, x: Tensor) -> Tensor:
        h = x
        for i in range(self.depth):
            h = nm.silu(nm.affine(h, self.params[f"w{i}"], self.params[f"b{i}"]))
        return nm.affine(h, self.params[f"w{self.depth}"], self.params[f"b{self.depth}"])

    def predict(self, x: np.ndarray) -> np.ndarray:
        with nm.no_grad():
            out = self.logits(Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64))))
        return np.argmax(out.data, axis=1)

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.trainable()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.trainable():
            n = p.data.size
            p.data = flat[offset:offset + n].reshape(p.data.shape).copy()
            offset += n

    @property
    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.trainable())


def _train_epochs(clf: Classifier, X: np.ndarray, y: np.ndarray, epochs: int,
                  opt: nm.AdamState, rng: np.random.Generator, batch_size: int) -> list[float]:
    params = clf.trainable()
    losses = []
    n = X.shape[0]
    for _ in range(int(epochs)):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            loss = nm.softmax_cross_entropy(clf.logits(Tensor(X[idx])), y[idx])
            nm.backward(loss, params=params)
            nm.adam_step(opt, params)
            total += float(loss.data) * idx.size
        losses.append(total / n)
    return losses


def train_classifier(X: np.ndarray, y: np.ndarray, n_classes: int, hidden: int = 64,
                     depth: int = 2, epochs: int = 200, learning_rate: float = 1e-3,
                     batch_size: int = 64, seed: int = 0, convergence_tol: float = 1e-4,
                     convergence_patience: int = 10) -> tuple[Classifier, list[float]]:
    """Train to convergence: stop once the best loss has not improved by more than
    ``convergence_tol`` for ``convergence_patience`` consecutive epochs, capped at
    ``epochs``. Returns the classifier and the per-epoch loss trace."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ServerError("train_classifier: need a non-empty (n, d) matrix")
    if y.shape != (X.shape[0],):
        raise ServerError(f"train_classifier: labels shape {y.shape} != ({X.shape[0]},)")
    if y.min() < 0 or y.max() >= n_classes:
        raise ServerError(f"train_classifier: labels outside [0, {n_classes})")
    clf = Classifier(X.shape[1], n_classes, hidden=hidden, depth=depth, seed=seed)
    opt = nm.adam_init(clf.trainable(), learning_rate=learning_rate)
    rng = nm.stream(seed, "classifier-train")
    losses: list[float] = []
    best = np.inf
    stale = 0
    for _ in range(int(epochs)):
        losses.extend(_train_epochs(clf, X, y, 1, opt, rng, batch_size))
        if best - losses[-1] > convergence_tol:
            best = losses[-1]
            stale = 0
        else:
            stale += 1
            if stale >= convergence_patience:
                break
    return clf, losses


def train_aggregated(synthetic: SyntheticDataset, n_classes: int, **kwargs) -> tuple[Classifier, list[float]]:
    """The aggregated model: one classifier over the full synthetic dataset."""
    if len(synthetic) == 0:
        raise ServerError("empty synthetic dataset")
    return train_classifier(synthetic.x, synthetic.y, n_classes, **kwargs)


def train_centralized(clients: list[ClientDataset], n_classes: int, **kwargs) -> tuple[Classifier, list[float]]:
    """Ceiling baseline: train on the union of all clients' train splits."""
    X = np.vstack([c.train_x for c in clients])
    y = np.concatenate([c.train_y for c in clients])
    return train_classifier(X, y, n_classes, **kwargs)


def train_fedavg(clients: list[ClientDataset], n_classes: int, rounds: int = 20,
                 local_epochs: int = 1, hidden: int = 64, depth: int = 2,
                 learning_rate: float = 1e-3, batch_size: int = 64,
                 seed: int = 0) -> tuple[Classifier, list[float]]:
    """Multi-round FedAvg reference: local training, then sample-weighted averaging.

    The per-round shuffle stream is shared across clients, so clients holding
    identical data produce identical updates (and the average equals each one).
    Returns the global classifier and the mean local loss per round.
    """
    if rounds < 1:
        raise ServerError(f"rounds must be >= 1, got {rounds}")
    global_clf = Classifier(clients[0].train_x.shape[1], n_classes, hidden=hidden,
                            depth=depth, seed=seed)
    sizes = np.array([c.train_x.shape[0] for c in clients], dtype=np.float64)
    weights = sizes / sizes.sum()
    history = []
    for rnd in range(int(rounds)):
        flats = []
        round_losses = []
        start = global_clf.get_flat_params()
        for c in clients:
            local = Classifier(c.train_x.shape[1], n_classes, hidden=hidden, depth=depth, seed=seed)
            local.set_flat_params(start)
            opt = nm.adam_init(local.trainable(), learning_rate=learning_rate)
            rng = nm.stream(seed, "fedavg", rnd)
            losses = _train_epochs(local, c.train_x, c.train_y, local_epochs, opt, rng, batch_size)
            flats.append(local.get_flat_params())
            round_losses.append(losses[-1])
        avg = np.sum([w * f for w, f in zip(weights, flats)], axis=0)
        global_clf.set_flat_params(avg)
        history.append(float(np.mean(round_losses)))
    return global_clf, history
