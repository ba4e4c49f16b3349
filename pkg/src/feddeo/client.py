"""Client-side work: fit per-category descriptions against the frozen model, pack uploads.

A description is one trainable conditioning vector per (client, category),
initialized from the class embedding and optimized so the frozen model denoises
the client's own samples well under it. Descriptions are the only thing a
client ever uploads; the wire format below is the entire communication.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .datagen import ClientDataset
from .diffusion import (
    ConditionVector,
    FrozenModelError,
    NoisePredictor,
    VarianceSchedule,
    forward_noise,
)
from .numerics import Tensor


class ClientError(Exception):
    """Invalid client state or training request."""


class UploadFormatError(Exception):
    """Malformed upload bytes; ``reason`` is one of 'magic', 'version', 'truncated'."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


UPLOAD_MAGIC = b"FDUP"
UPLOAD_VERSION = 1


@dataclass
class Description:
    """One client-trained conditioning vector for one category."""

    client_id: int
    category: int
    condition: ConditionVector
    epochs_trained: int = 0


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    descriptions: dict[int, Description] = field(default_factory=dict)


def init_descriptions(dataset: ClientDataset, model: NoisePredictor) -> ClientState:
    """Seed each local category's description with a self-caption.

    The starting point is the model's caption of the client's overall data
    location: class embedding plus the projected mean of the local train
    split. That places the description in the right neighborhood of condition
    space; per-category training does the actual localization.
    """
    state = ClientState(client_id=dataset.client_id, dataset=dataset)
    anchor = dataset.train_x.mean(axis=0)
    for cat in dataset.categories:
        if not (0 <= cat < model.n_classes):
            raise ClientError(f"client {dataset.client_id} holds unknown category {cat}")
        state.descriptions[cat] = Description(
            client_id=dataset.client_id, category=cat,
            condition=model.caption(cat, anchor))
    return state


def train_descriptions(state: ClientState, model: NoisePredictor, sched: VarianceSchedule,
                       epochs: int = 10, learning_rate: float = 1e-2, batch_size: int = 64,
                       seed: int = 0) -> list[float]:
    """Optimize each category's description by denoising MSE on that category's samples.

    Categories train independently: separate data, RNG stream, and Adam state
    per category, so training one can never perturb another. The model must be
    frozen; only the description vectors move. Returns per-epoch mean losses
    pooled over the client's categories.
    """
    if not model.frozen:
        raise FrozenModelError("description training requires the frozen distributed model")
    if not state.descriptions:
        raise ClientError(f"client {state.client_id} has no descriptions; call init_descriptions")
    per_epoch = np.zeros(int(epochs))
    counts = np.zeros(int(epochs))
    for cat in sorted(state.descriptions):
        desc = state.descriptions[cat]
        data = state.dataset.category_train_x(cat)
        if data.shape[0] == 0:
            raise ClientError(f"client {state.client_id} has no train samples for category {cat}")
        Z = model.standardize(data)
        rng = nm.stream(seed, "descriptions", state.client_id, cat)
        table = Tensor(desc.condition.values.reshape(1, -1).copy(),
                       requires_grad=True, name=f"d_{state.client_id}_{cat}")
        opt = nm.adam_init([table], learning_rate=learning_rate)
        n = Z.shape[0]
        for epoch in range(int(epochs)):
            order = rng.permutation(n)
            for lo in range(0, n, batch_size):
                idx = order[lo:lo + batch_size]
                z0 = Z[idx]
                t = rng.integers(1, sched.T + 1, size=idx.size)
                eps = rng.normal(size=z0.shape)
                x_t = forward_noise(z0, eps, t, sched)
                cond = nm.embedding(table, np.zeros(idx.size, dtype=np.int64))
                loss = nm.mse(model.forward(Tensor(x_t), t, cond), Tensor(eps))
                nm.backward(loss, params=[table])
                nm.adam_step(opt, [table])
                per_epoch[epoch] += float(loss.data) * idx.size
                counts[epoch] += idx.size
        desc.condition = ConditionVector(table.data[0].copy(), "description")
        desc.epochs_trained += int(epochs)
    return list(per_epoch / counts)


# ---------------------------------------------------------------------------
# upload payload


@dataclass
class UploadPayload:
    """The complete client upload: per-category f32 description vectors.

    ``model_digest`` identifies the frozen model the descriptions were trained
    against. It travels out of band (stage manifest / in memory), never in the
    wire bytes, so the byte layout stays minimal.
    """

    client_id: int
    entries: list[tuple[int, np.ndarray]]
    model_digest: str | None = None

    @property
    def parameter_count(self) -> int:
        return sum(v.size for _, v in self.entries)

    @property
    def value_bytes(self) -> int:
        return self.parameter_count * 4

    def to_bytes(self) -> bytes:
        out = [UPLOAD_MAGIC, struct.pack("<III", UPLOAD_VERSION, self.client_id, len(self.entries))]
        for cat, values in self.entries:
            v32 = np.ascontiguousarray(values, dtype="<f4")
            out.append(struct.pack("<II", cat, v32.size))
            out.append(v32.tobytes())
        return b"".join(out)


def package_upload(state: ClientState, model_digest: str | None = None) -> UploadPayload:
    """Quantize descriptions to f32 and assemble the wire payload, sorted by category."""
    if not state.descriptions:
        raise ClientError(f"client {state.client_id} has nothing to upload")
    entries = [(cat, state.descriptions[cat].condition.values.astype("<f4"))
               for cat in sorted(state.descriptions)]
    return UploadPayload(client_id=state.client_id, entries=entries, model_digest=model_digest)


def parse_upload(data: bytes, model_digest: str | None = None) -> UploadPayload:
    """Decode payload bytes; raises UploadFormatError('magic'|'version'|'truncated')."""
    if len(data) < 4 or data[:4] != UPLOAD_MAGIC:
        raise UploadFormatError("magic", f"bad magic {data[:4]!r}, expected {UPLOAD_MAGIC!r}")
    if len(data) < 16:
        raise UploadFormatError("truncated", f"header needs 16 bytes, got {len(data)}")
    version, client_id, count = struct.unpack_from("<III", data, 4)
    if version != UPLOAD_VERSION:
        raise UploadFormatError("version", f"unsupported payload version {version}")
    entries = []
    offset = 16
    for _ in range(count):
        if offset + 8 > len(data):
            raise UploadFormatError("truncated", f"entry header at byte {offset} past end")
        cat, dim = struct.unpack_from("<II", data, offset)
        offset += 8
        end = offset + 4 * dim
        if end > len(data):
            raise UploadFormatError("truncated", f"entry values at byte {offset} past end")
        values = np.frombuffer(data[offset:end], dtype="<f4").copy()
        entries.append((int(cat), values))
        offset = end
    if offset != len(data):
        raise UploadFormatError("truncated", f"{len(data) - offset} trailing bytes after last entry")
    return UploadPayload(client_id=int(client_id), entries=entries, model_digest=model_digest)
