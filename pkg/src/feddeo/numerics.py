"""Reverse-mode autodiff on dense float64 arrays, plus Adam and a finite-difference checker.

Tensors record the operations that produced them (define-by-run), so ``backward``
can replay the tape in reverse topological order. Internal math is float64
throughout; float32 only appears at serialization boundaries elsewhere in the
package. The op set is deliberately small: exactly what an MLP noise predictor,
an embedding table, and a softmax classifier need.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class GraphError(Exception):
    """Raised for structural misuse: backward before forward, missing grads, bad loss."""


class ShapeError(GraphError):
    """Raised when operand shapes are incompatible; names the op and the shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.op = op


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block. Forward values are unaffected."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus optional grad and the tape entry that produced it.

    ``requires_grad`` marks trainable leaves. Interior nodes propagate gradients
    regardless, but only leaves marked trainable have ``.grad`` populated after
    ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._needs_grad = self.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build an interior node, recording the tape entry only when grads can flow."""
    out = Tensor(data)
    if _grad_enabled and any(p._needs_grad for p in parents):
        out._parents = parents
        out._backward = backward_fn
        out._needs_grad = True
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("add", a.data.shape, b.data.shape)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("subtract", a.data.shape, b.data.shape)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("multiply", a.data.shape, b.data.shape)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with x of shape (batch, n_in), w (n_in, n_out), b (n_out,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError("affine", x.data.shape, w.data.shape)
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError("affine bias", b.data.shape, (w.data.shape[1],))
    return _result(
        x.data @ w.data + b.data,
        (x, w, b),
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s
    return _result(out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat", ())
    ndim = parts[0].data.ndim
    for p in parts:
        if p.data.ndim != ndim:
            raise ShapeError("concat", *(q.data.shape for q in parts))
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", *(p.data.shape for p in parts)) from exc
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tuple(parts), bwd)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup: returns table[indices] with gradient scattered back to the rows."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding", table.data.shape)
    if idx.ndim != 1:
        raise ShapeError("embedding indices", idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise GraphError(f"embedding: index out of range for table with {table.data.shape[0]} rows")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), bwd)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference. Returns a scalar tensor."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError("mse", pred.data.shape, target.data.shape)
    diff = pred.data - target.data
    n = max(diff.size, 1)
    scale = 2.0 / n

    def bwd(g):
        gd = g * scale * diff
        return (gd, -gd)

    return _result(np.float64(np.mean(diff * diff)) if diff.size else np.float64(0.0),
                   (pred, target), bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels.

    ``logits`` is (batch, classes); ``labels`` is a length-batch int array.
    Stable log-sum-exp; gradient is (softmax - onehot) / batch.
    """
    logits = _as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.data.shape[0]:
        raise ShapeError("softmax_cross_entropy", logits.data.shape, y.shape)
    if y.size and (y.min() < 0 or y.max() >= logits.data.shape[1]):
        raise GraphError("softmax_cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    batch = y.shape[0]
    loss = float(np.mean(np.log(ez.sum(axis=1)) - z[np.arange(batch), y]))

    def bwd(g):
        gl = probs.copy()
        gl[np.arange(batch), y] -= 1.0
        return (g * gl / batch,)

    return _result(np.float64(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the tape; each recorded node appears exactly once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: list[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(tensor) through the tape that produced ``loss``.

    Returns a map from trainable tensor to its gradient for this call, and
    accumulates the same into each tensor's ``.grad``. Parameters listed in
    ``params`` but unreachable from ``loss`` get explicit zero gradients
    (disconnected means the derivative is zero, not undefined).
    """
    loss = _as_tensor(loss)
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _toposort(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            grads[node] = grads[node] + g if node in grads else np.array(g, dtype=np.float64)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent._needs_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = np.array(pg, dtype=np.float64)
    if params is not None:
        for p in params:
            if p.requires_grad and p not in grads:
                grads[p] = np.zeros_like(p.data)
    for t, g in grads.items():
        t.grad = g.copy() if t.grad is None else t.grad + g
    return grads


class ComputeGraph:
    """A reusable forward function over a fixed parameter list.

    ``build`` maps a list of input tensors to a single output tensor; each
    ``forward`` call re-records the tape (define-by-run), so control flow in
    ``build`` may depend on the inputs.
    """

    def __init__(self, build, params: list[Tensor], input_shapes: list[tuple[int, ...]] | None = None):
        self.build = build
        self.params = list(params)
        self.input_shapes = input_shapes
        self._output: Tensor | None = None

    def forward(self, inputs: list[Tensor]) -> Tensor:
        inputs = [_as_tensor(x) for x in inputs]
        if self.input_shapes is not None:
            if len(inputs) != len(self.input_shapes):
                raise GraphError(f"forward: expected {len(self.input_shapes)} inputs, got {len(inputs)}")
            for i, (x, want) in enumerate(zip(inputs, self.input_shapes)):
                if want is not None and x.data.shape != tuple(want):
                    raise ShapeError(f"forward input {i}", x.data.shape, want)
        self._output = self.build(inputs)
        return self._output

    def backward(self, loss: Tensor | None = None) -> dict[Tensor, np.ndarray]:
        if self._output is None:
            raise GraphError("backward called before any forward pass")
        return backward(self._output if loss is None else loss, params=self.params)

    def nodes(self) -> list[Tensor]:
        """Topological order of the last recorded tape (leaves first)."""
        if self._output is None:
            raise GraphError("nodes requested before any forward pass")
        return _toposort(self._output)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Adam moments and hyperparameters; one slot per parameter, in init order."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_init(params: list[Tensor], learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)
    state.first_moment = [np.zeros_like(p.data) for p in params]
    state.second_moment = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(state: AdamState, params: list[Tensor],
              grads: dict[Tensor, np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place. Clears ``.grad`` on the params.

    Gradients come from ``grads`` when given, else from each param's ``.grad``.
    A parameter with no gradient at all is an error: silently skipping it would
    hide a disconnected graph.
    """
    if len(state.first_moment) != len(params):
        raise GraphError(f"adam_step: state holds {len(state.first_moment)} slots, got {len(params)} params")
    resolved = []
    for p in params:
        g = grads.get(p) if grads is not None else p.grad
        if g is None:
            label = p.name if p.name else f"<unnamed {p.data.shape}>"
            raise GraphError(f"adam_step: missing gradient for parameter '{label}'")
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", g.shape, p.data.shape)
        resolved.append(g)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, resolved, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradientCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tolerance: float
    passed: bool


def gradient_check(graph: ComputeGraph, inputs: list[Tensor], tolerance: float = 1e-4,
                   step: float = 1e-4) -> GradientCheckReport:
    """Compare tape gradients against central finite differences, component-wise.

    For each parameter component: |autodiff - (L(p+h) - L(p-h)) / 2h| divided by
    (|autodiff| + 1e-8). Reports the worst ratio per parameter and overall.
    """
    out = graph.forward(inputs)
    if out.data.size != 1:
        raise GraphError("gradient_check: graph output must be scalar")
    grads = backward(out, params=graph.params)
    per_param: dict[str, float] = {}
    worst = 0.0
    for k, p in enumerate(graph.params):
        if not p.requires_grad:
            continue
        auto = grads[p]
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(graph.forward(inputs).data)
            flat[i] = orig - step
            lo = float(graph.forward(inputs).data)
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)
        rel = np.abs(auto - fd) / (np.abs(auto) + 1e-8)
        name = p.name if p.name else f"param{k}"
        per_param[name] = float(rel.max()) if rel.size else 0.0
        worst = max(worst, per_param[name])
    return GradientCheckReport(max_rel_error=worst, per_param=per_param,
                               tolerance=tolerance, passed=worst < tolerance)


# ---------------------------------------------------------------------------
# seeded streams


def stream_seed(master_seed: int, *labels) -> int:
    """Derive a child seed from a master seed and a label path, via SHA-256.

    Independent stages hash disjoint label paths, so streams never collide or
    overlap by construction; the same path always yields the same stream.
    """
    import hashlib

    text = ":".join([str(int(master_seed))] + [str(l) for l in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master_seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master_seed, *labels))
