"""Binary checkpoint container: named f32 arrays + named f64 scalars + SHA-256 digest.

Layout, all little-endian:
    magic "FDEO" | version u32 | n_arrays u32 | n_scalars u32
    per array  (name-sorted): name_len u32 | name utf-8 | rank u32 | dims u32*rank | values f32
    per scalar (name-sorted): name_len u32 | name utf-8 | value f64
    sha256 digest (32 bytes) over everything before it

Entries are written name-sorted, so the same content always produces the same
bytes and the same digest. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile

import numpy as np

from .diffusion import IntegrityError, NoisePredictor, VarianceSchedule, make_schedule
from .server import Classifier

CHECKPOINT_MAGIC = b"FDEO"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(Exception):
    """Malformed checkpoint; ``reason`` is one of 'magic', 'version', 'truncated'."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


def _encode(arrays: dict[str, np.ndarray], scalars: dict[str, float]) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, len(arrays), len(scalars))]
    for name in sorted(arrays):
        raw = name.encode("utf-8")
        # note: ascontiguousarray would promote 0-d to 1-d and change the shape
        arr = np.asarray(arrays[name], dtype="<f4", order="C")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        out.append(arr.tobytes())
    for name in sorted(scalars):
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<d", float(scalars[name])))
    return b"".join(out)


def save_checkpoint(path, arrays: dict[str, np.ndarray], scalars: dict[str, float]) -> str:
    """Write atomically; returns the hex digest recorded in the file."""
    body = _encode(arrays, scalars)
    digest = hashlib.sha256(body).digest()
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
            fh.write(digest)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return digest.hex()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointFormatError("truncated", f"{what} at byte {self.offset} past end of file")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, float], str]:
    """Read and verify; returns (arrays as float64, scalars, hex digest)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("magic", f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 48:  # header + digest minimum
        raise CheckpointFormatError("truncated", f"file is {len(blob)} bytes, too short")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"checkpoint digest mismatch in {path}")
    r = _Reader(body)
    r.take(4, "magic")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError("version", f"unsupported checkpoint version {version}")
    n_arrays = r.u32("array count")
    n_scalars = r.u32("scalar count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        name = r.take(r.u32("array name length"), "array name").decode("utf-8")
        rank = r.u32("array rank")
        dims = [r.u32("array dim") for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(r.take(4 * count, f"array {name!r} values"), dtype="<f4")
        arrays[name] = values.astype(np.float64).reshape(dims)
    scalars: dict[str, float] = {}
    for _ in range(n_scalars):
        name = r.take(r.u32("scalar name length"), "scalar name").decode("utf-8")
        scalars[name] = struct.unpack("<d", r.take(8, f"scalar {name!r}"))[0]
    if r.offset != len(body):
        raise CheckpointFormatError("truncated", f"{len(body) - r.offset} unexpected trailing bytes")
    return arrays, scalars, digest.hex()


# ---------------------------------------------------------------------------
# model and classifier persistence


def save_model(path, model: NoisePredictor, sched: VarianceSchedule) -> str:
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    arrays["class_embeddings"] = model.class_embeddings.data
    arrays["context_projection"] = model.context_projection
    arrays["data_shift"] = model.data_shift
    arrays["data_scale"] = model.data_scale
    scalars = {
        "data_dim": model.data_dim, "n_classes": model.n_classes, "cond_dim": model.cond_dim,
        "hidden": model.hidden, "depth": model.depth, "time_dim": model.time_dim,
        "context_scale": model.context_scale,
        "T": sched.T, "beta_min": sched.beta_min, "beta_max": sched.beta_max, "eta": sched.eta,
    }
    return save_checkpoint(path, arrays, scalars)


def load_model(path) -> tuple[NoisePredictor, VarianceSchedule]:
    """Rebuild the model (unfrozen) and its schedule from a checkpoint."""
    arrays, scalars, _ = load_checkpoint(path)
    model = NoisePredictor(
        data_dim=int(scalars["data_dim"]), n_classes=int(scalars["n_classes"]),
        cond_dim=int(scalars["cond_dim"]), hidden=int(scalars["hidden"]),
        depth=int(scalars["depth"]), time_dim=int(scalars["time_dim"]), seed=0,
        context_scale=scalars["context_scale"])
    for k, tensor in model.params.items():
        tensor.data = arrays[f"param/{k}"].copy()
    model.class_embeddings.data = arrays["class_embeddings"].copy()
    model.context_projection = arrays["context_projection"].copy()
    model.data_shift = arrays["data_shift"].copy()
    model.data_scale = arrays["data_scale"].copy()
    sched = make_schedule(T=int(scalars["T"]), beta_min=scalars["beta_min"],
                          beta_max=scalars["beta_max"], eta=scalars["eta"])
    return model, sched


def save_classifier(path, clf: Classifier) -> str:
    arrays = {f"param/{k}": v.data for k, v in clf.params.items()}
    scalars = {"data_dim": clf.data_dim, "n_classes": clf.n_classes,
               "hidden": clf.hidden, "depth": clf.depth}
    return save_checkpoint(path, arrays, scalars)


def load_classifier(path) -> Classifier:
    arrays, scalars, _ = load_checkpoint(path)
    clf = Classifier(data_dim=int(scalars["data_dim"]), n_classes=int(scalars["n_classes"]),
                     hidden=int(scalars["hidden"]), depth=int(scalars["depth"]), seed=0)
    for k, tensor in clf.params.items():
        tensor.data = arrays[f"param/{k}"].copy()
    return clf
