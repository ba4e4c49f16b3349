"""Conditional denoising diffusion at desk scale: schedule, MLP noise predictor, DDIM sampler.

The model operates in standardized data space (shift/scale fitted at pretraining
and stored on the model as constants), so the N(0, I) terminal distribution is a
reasonable endpoint regardless of the raw data's location. The conditioning
input is a single vector: either a learned class embedding or a client-trained
description. Composition sums the two conditional noise predictions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import GraphError, ShapeError, Tensor


class ScheduleError(Exception):
    """Invalid schedule parameters or an out-of-range timestep."""


class FrozenModelError(Exception):
    """A training-time mutation was attempted on a frozen model."""


class ConditionError(Exception):
    """A conditioning vector does not match the model's condition dimension."""


class IntegrityError(Exception):
    """A digest mismatch: content does not match what was distributed or saved."""


# ---------------------------------------------------------------------------
# variance schedule


@dataclass
class VarianceSchedule:
    """Linear beta schedule with cumulative products indexed 0..T.

    ``alpha_bar[0] = 1`` (no noise) and ``alpha_bar[t]`` decreases strictly in t.
    ``sigma[t]`` is the DDIM stochasticity for the configured eta; eta = 0 makes
    the reverse process deterministic.
    """

    T: int
    beta_min: float
    beta_max: float
    eta: float
    betas: np.ndarray = field(repr=False)       # length T+1, betas[0] unused
    alphas: np.ndarray = field(repr=False)      # 1 - betas
    alpha_bar: np.ndarray = field(repr=False)   # length T+1, alpha_bar[0] = 1
    sigma: np.ndarray = field(repr=False)       # length T+1, sigma[0] = 0


def make_schedule(T: int = 200, beta_min: float = 1e-4, beta_max: float = 0.02,
                  eta: float = 0.0) -> VarianceSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ScheduleError(f"betas must satisfy 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if eta < 0.0:
        raise ScheduleError(f"eta must be >= 0, got {eta}")
    betas = np.zeros(T + 1)
    betas[1:] = np.linspace(beta_min, beta_max, T)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    alpha_bar[0] = 1.0
    sigma = np.zeros(T + 1)
    if eta > 0.0:
        t = np.arange(1, T + 1)
        ratio = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])
        sigma[1:] = eta * np.sqrt(ratio) * np.sqrt(1.0 - alpha_bar[t] / alpha_bar[t - 1])
    return VarianceSchedule(T=T, beta_min=beta_min, beta_max=beta_max, eta=eta,
                            betas=betas, alphas=alphas, alpha_bar=alpha_bar, sigma=sigma)


def _check_t(sched: VarianceSchedule, t: int, low: int) -> int:
    t = int(t)
    if not (low <= t <= sched.T):
        raise ScheduleError(f"timestep {t} outside [{low}, {sched.T}]")
    return t


def forward_noise(x0: np.ndarray, eps: np.ndarray, t, sched: VarianceSchedule) -> np.ndarray:
    """Closed-form noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps. t = 0 is the identity.

    ``t`` may be a scalar applied to the whole batch or a per-row integer array.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError("forward_noise", x0.shape, eps.shape)
    tarr = np.asarray(t, dtype=np.int64)
    if tarr.ndim == 0:
        _check_t(sched, int(tarr), 0)
        ab = sched.alpha_bar[int(tarr)]
    else:
        if tarr.shape != (x0.shape[0],):
            raise ShapeError("forward_noise t", tarr.shape, (x0.shape[0],))
        if tarr.min() < 0 or tarr.max() > sched.T:
            raise ScheduleError(f"timesteps outside [0, {sched.T}]")
        ab = sched.alpha_bar[tarr].reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: VarianceSchedule,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One reverse step t -> t-1 from the predicted noise.

    Reconstructs x0_hat, then re-noises to level t-1; when sigma[t] > 0 fresh
    noise must be supplied, when sigma[t] = 0 the step is deterministic and
    ``noise`` is ignored.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ShapeError("ddim_step", x_t.shape, eps_hat.shape)
    t = _check_t(sched, t, 1)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    sig = sched.sigma[t]
    resid = 1.0 - ab_prev - sig * sig
    if resid < -1e-12:
        raise ScheduleError(f"sigma[{t}] too large: 1 - ab[t-1] - sigma^2 = {resid:.3e} < 0")
    resid = max(resid, 0.0)
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(resid) * eps_hat
    if sig > 0.0:
        if noise is None:
            raise ScheduleError(f"sigma[{t}] > 0 requires a noise draw")
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != x_t.shape:
            raise ShapeError("ddim_step noise", noise.shape, x_t.shape)
        out = out + sig * noise
    return out


# ---------------------------------------------------------------------------
# conditioning


CONDITION_KINDS = ("class_embedding", "description", "zero")


@dataclass
class ConditionVector:
    """A single conditioning vector plus its provenance kind."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConditionError(f"condition must be a vector, got shape {self.values.shape}")
        if self.kind not in CONDITION_KINDS:
            raise ConditionError(f"unknown condition kind {self.kind!r}, expected one of {CONDITION_KINDS}")


def zero_condition(dim: int) -> ConditionVector:
    return ConditionVector(np.zeros(dim), "zero")


def _condition_rows(cond, cond_dim: int, batch: int) -> np.ndarray:
    """Normalize a condition argument to a (batch, cond_dim) float array."""
    if isinstance(cond, ConditionVector):
        values = cond.values
    else:
        values = np.asarray(cond, dtype=np.float64)
    if values.ndim == 1:
        if values.shape[0] != cond_dim:
            raise ConditionError(f"condition has dim {values.shape[0]}, model expects {cond_dim}")
        return np.broadcast_to(values, (batch, cond_dim))
    if values.shape != (batch, cond_dim):
        raise ConditionError(f"condition batch shape {values.shape} != {(batch, cond_dim)}")
    return values


# ---------------------------------------------------------------------------
# noise predictor


class NoisePredictor:
    """MLP noise predictor over [x_t, time features, condition].

    Hidden layers use SiLU; the output layer starts at zero so a fresh model
    predicts zero noise. ``class_embeddings`` is a trainable lookup table with
    one row per category, standing in for a text encoder's class features.
    ``context_projection`` is a fixed map from data space into condition space
    used to annotate the pretraining corpus with coarse location tags; it
    ships with the model, so anyone holding the model can caption their own
    data the same way. ``data_shift``/``data_scale`` standardize raw data into
    model space.
    """

    def __init__(self, data_dim: int, n_classes: int, cond_dim: int = 16, hidden: int = 128,
                 depth: int = 3, time_dim: int = 32, seed: int = 0,
                 context_scale: float = 0.35):
        if time_dim % 2 != 0:
            raise ScheduleError(f"time_dim must be even, got {time_dim}")
        self.data_dim = int(data_dim)
        self.n_classes = int(n_classes)
        self.cond_dim = int(cond_dim)
        self.hidden = int(hidden)
        self.depth = int(depth)
        self.time_dim = int(time_dim)
        self.context_scale = float(context_scale)
        self.frozen = False
        self.frozen_digest: str | None = None
        self.data_shift = np.zeros(data_dim)
        self.data_scale = np.ones(data_dim)
        rng = nm.stream(seed, "model-init")
        self.params: dict[str, Tensor] = {}
        n_in = data_dim + time_dim + cond_dim
        widths = [n_in] + [hidden] * depth
        for i in range(depth):
            w = rng.normal(size=(widths[i], widths[i + 1])) * np.sqrt(2.0 / widths[i])
            self.params[f"w{i}"] = Tensor(w, requires_grad=True, name=f"w{i}")
            self.params[f"b{i}"] = Tensor(np.zeros(widths[i + 1]), requires_grad=True, name=f"b{i}")
        self.params["w_out"] = Tensor(np.zeros((hidden, data_dim)), requires_grad=True, name="w_out")
        self.params["b_out"] = Tensor(np.zeros(data_dim), requires_grad=True, name="b_out")
        emb = rng.normal(size=(n_classes, cond_dim)) * 0.5
        self.class_embeddings = Tensor(emb, requires_grad=True, name="class_embeddings")
        self.context_projection = rng.normal(size=(data_dim, cond_dim)) * (
            self.context_scale / np.sqrt(data_dim))
        half = time_dim // 2
        self._time_freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))

    def trainable(self) -> list[Tensor]:
        return list(self.params.values()) + [self.class_embeddings]

    def time_features(self, t) -> np.ndarray:
        """Sinusoidal features of the integer timestep, shape (batch, time_dim)."""
        tarr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        angles = tarr[:, None] * self._time_freqs[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    def forward(self, x_t: Tensor, t, cond: Tensor) -> Tensor:
        """Predicted noise for standardized x_t under the given condition rows."""
        batch = x_t.data.shape[0]
        tf = self.time_features(t)
        if tf.shape[0] == 1 and batch > 1:
            tf = np.broadcast_to(tf, (batch, self.time_dim))
        h = nm.concat([x_t, Tensor(tf), cond], axis=1)
        for i in range(self.depth):
            h = nm.silu(nm.affine(h, self.params[f"w{i}"], self.params[f"b{i}"]))
        return nm.affine(h, self.params["w_out"], self.params["b_out"])

    def class_condition(self, category: int) -> ConditionVector:
        if not (0 <= category < self.n_classes):
            raise ConditionError(f"category {category} outside [0, {self.n_classes})")
        return ConditionVector(self.class_embeddings.data[category].copy(), "class_embedding")

    def caption(self, category: int, anchor: np.ndarray) -> ConditionVector:
        """Condition saying "this class, near this location".

        Class embedding plus the projected anchor point, matching how the
        pretraining corpus is annotated. Anyone holding the model can caption
        their own data this way, e.g. to seed a description vector.
        """
        anchor = np.asarray(anchor, dtype=np.float64)
        if anchor.shape != (self.data_dim,):
            raise ConditionError(f"caption anchor must have shape ({self.data_dim},), "
                                 f"got {anchor.shape}")
        base = self.class_condition(category).values
        return ConditionVector(base + anchor @ self.context_projection, "description")

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.data_shift) / self.data_scale

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.data_scale + self.data_shift


def model_digest(model: NoisePredictor) -> str:
    """SHA-256 over the canonical f32 serialization of all parameters and constants.

    Recomputed from live values on each call, so any post-freeze mutation shows
    up as a digest mismatch against ``model.frozen_digest``.
    """
    h = hashlib.sha256()
    h.update(f"noise-predictor:{model.data_dim}:{model.n_classes}:{model.cond_dim}:"
             f"{model.hidden}:{model.depth}:{model.time_dim}".encode())
    entries = sorted(model.params.items())
    entries.append(("class_embeddings", model.class_embeddings))
    entries.append(("context_projection", Tensor(model.context_projection)))
    entries.append(("data_shift", Tensor(model.data_shift)))
    entries.append(("data_scale", Tensor(model.data_scale)))
    for name, tensor in entries:
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return h.hexdigest()


def freeze(model: NoisePredictor) -> str:
    """Mark the model immutable and record its digest. Returns the digest.

    Frozen parameters also stop requiring gradients, so later backward passes
    (description training) flow through the weights without writing to them.
    """
    model.frozen = True
    model.frozen_digest = model_digest(model)
    for p in model.trainable():
        p.grad = None
        p.requires_grad = False
        p._needs_grad = False
    return model.frozen_digest


def predict_noise(model: NoisePredictor, x_t: np.ndarray, t, cond) -> np.ndarray:
    """Inference-only noise prediction on standardized inputs. Works frozen or not."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 2 or x_t.shape[1] != model.data_dim:
        raise ShapeError("predict_noise", x_t.shape, (-1, model.data_dim))
    rows = _condition_rows(cond, model.cond_dim, x_t.shape[0])
    with nm.no_grad():
        out = model.forward(Tensor(x_t), t, Tensor(rows))
    return out.data


def compose_noise(model: NoisePredictor, x_t: np.ndarray, t, description,
                  class_cond, weights: tuple[float, float] = (1.0, 1.0)) -> np.ndarray:
    """Weighted sum of the description-conditioned and class-conditioned predictions.

    The default (1.0, 1.0) is the plain unweighted sum of the two branches.
    """
    w_d, w_c = float(weights[0]), float(weights[1])
    return (w_d * predict_noise(model, x_t, t, description)
            + w_c * predict_noise(model, x_t, t, class_cond))


# ---------------------------------------------------------------------------
# pretraining


def pretrain_dm(model: NoisePredictor, sched: VarianceSchedule,
                data: tuple[np.ndarray, np.ndarray], epochs: int,
                learning_rate: float = 1e-3, batch_size: int = 256, seed: int = 0,
                cond_jitter: float = 0.0, conditions: np.ndarray | None = None,
                condition_dropout: float = 0.0) -> list[float]:
    """Fit the noise predictor and class embeddings on labeled raw samples.

    Standardization constants are (re)fitted from the data and stored on the
    model. Each sample draws t uniform on {1..T} and fresh Gaussian noise; the
    condition defaults to the sample's class embedding, optionally jittered to
    smooth the condition space.

    ``conditions`` lets the corpus carry richer per-sample annotations (class
    embedding plus some descriptive offset); with ``condition_dropout`` a
    fraction of samples fall back to the bare class embedding so it keeps the
    meaning "this class, everything else unspecified". The richer the spread
    of training conditions, the more an optimized condition vector can later
    express. Returns per-epoch mean losses.
    """
    if model.frozen:
        raise FrozenModelError("cannot pretrain a frozen model")
    X, y = data
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise GraphError("pretrain_dm: need a non-empty (n, d) sample matrix")
    if y.shape != (X.shape[0],):
        raise ShapeError("pretrain_dm labels", y.shape, (X.shape[0],))
    if y.min() < 0 or y.max() >= model.n_classes:
        raise GraphError(f"pretrain_dm: labels outside [0, {model.n_classes})")
    if conditions is not None:
        conditions = np.asarray(conditions, dtype=np.float64)
        if conditions.shape != (X.shape[0], model.cond_dim):
            raise ShapeError("pretrain_dm conditions", conditions.shape,
                             (X.shape[0], model.cond_dim))
    if not 0.0 <= condition_dropout <= 1.0:
        raise GraphError(f"condition_dropout must be in [0, 1], got {condition_dropout}")

    model.data_shift = X.mean(axis=0)
    model.data_scale = np.maximum(X.std(axis=0), 1e-8)
    Z = model.standardize(X)

    rng = nm.stream(seed, "pretrain")
    params = model.trainable()
    opt = nm.adam_init(params, learning_rate=learning_rate)
    losses: list[float] = []
    n = Z.shape[0]
    for _ in range(int(epochs)):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            z0 = Z[idx]
            t = rng.integers(1, sched.T + 1, size=idx.size)
            eps = rng.normal(size=z0.shape)
            x_t = forward_noise(z0, eps, t, sched)
            cond = nm.embedding(model.class_embeddings, y[idx])
            if conditions is not None:
                # dropped rows keep the live class embedding (and its gradient),
                # annotated rows use the given condition as a constant
                drop = (rng.random(idx.size) < condition_dropout).astype(np.float64)
                mask = np.repeat(drop[:, None], model.cond_dim, axis=1)
                cond = nm.add(nm.multiply(cond, Tensor(mask)),
                              Tensor(conditions[idx] * (1.0 - mask)))
            if cond_jitter > 0.0:
                cond = nm.add(cond, Tensor(cond_jitter * rng.normal(size=cond.data.shape)))
            loss = nm.mse(model.forward(Tensor(x_t), t, cond), Tensor(eps))
            nm.backward(loss, params=params)
            nm.adam_step(opt, params)
            total += float(loss.data) * idx.size
            count += idx.size
        losses.append(total / count)
    return losses


# ---------------------------------------------------------------------------
# sampling


def sample(model: NoisePredictor, sched: VarianceSchedule, class_cond, description=None,
           count: int = 1, seed: int = 0, weights: tuple[float, float] = (1.0, 1.0)) -> np.ndarray:
    """Generate ``count`` raw-space samples by the DDIM reverse process.

    With a description, each step composes the two conditional predictions;
    without one, the class condition alone guides the chain. The model must be
    frozen: generation is a server-side operation on the distributed model.
    """
    if not model.frozen:
        raise FrozenModelError("sample requires a frozen model")
    if count < 1:
        raise ScheduleError(f"count must be >= 1, got {count}")
    rng = nm.stream(seed, "sample")
    x = rng.normal(size=(count, model.data_dim))
    for t in range(sched.T, 0, -1):
        if description is not None:
            eps_hat = compose_noise(model, x, t, description, class_cond, weights)
        else:
            eps_hat = predict_noise(model, x, t, class_cond)
        noise = rng.normal(size=x.shape) if sched.sigma[t] > 0.0 else None
        x = ddim_step(x, eps_hat, t, sched, noise)
    return model.destandardize(x)
