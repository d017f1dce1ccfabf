"""Small reverse-mode autodiff over dense float64 matrices.

Only the handful of operations the policy needs are provided: matmul, bias
add, ReLU, column concat, row gather, segment mean, and a masked
cross-entropy. Each op records a closure that pushes gradients to its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NonFiniteError("non-finite value produced in forward pass")
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad.

        ``grad`` is the upstream gradient (ones by default, i.e. d sum(self)).
        """
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value) if grad is None else np.broadcast_to(grad, self.shape).astype(np.float64)
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def _node(value, parents, backward) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(value)
    return Tensor(value, True, live, backward)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return _node(a.value @ b.value, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may be a bias vector broadcast over rows."""
    out = a.value + b.value

    def back(g):
        _acc(a, g)
        _acc(b, g if b.value.ndim == g.ndim else g.sum(axis=0))

    return _node(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias broadcast over rows."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch {x.shape} @ {w.shape}")

    def back(g):
        _acc(x, g @ w.value.T)
        _acc(w, x.value.T @ g)
        _acc(b, g.sum(axis=0))

    return _node(x.value @ w.value + b.value, (x, w, b), back)


def relu(x: Tensor) -> Tensor:
    on = x.value > 0

    def back(g):
        _acc(x, g * on)

    return _node(x.value * on, (x,), back)


def concat(parts: list[Tensor]) -> Tensor:
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _acc(p, g[:, lo:hi])

    return _node(np.concatenate([p.value for p in parts], axis=1), tuple(parts), back)


class Index:
    """Integer row index plus a lazily built sparse scatter matrix.

    Reusing one ``Index`` across ops that share the same gather pattern keeps
    backward passes to a sparse matmul instead of ``np.add.at``.
    """

    __slots__ = ("idx", "n", "_scatter", "_inv_count")

    def __init__(self, idx, n: int):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.n = int(n)
        if len(self.idx) and (self.idx.min() < 0 or self.idx.max() >= self.n):
            raise ValueError("index out of range")
        self._scatter = None
        self._inv_count = None

    @property
    def scatter(self) -> csr_matrix:
        if self._scatter is None:
            m = len(self.idx)
            self._scatter = csr_matrix((np.ones(m), (self.idx, np.arange(m))), shape=(self.n, m))
        return self._scatter

    @property
    def inv_count(self) -> np.ndarray:
        if self._inv_count is None:
            counts = np.bincount(self.idx, minlength=self.n).astype(np.float64)
            self._inv_count = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)[:, None]
        return self._inv_count


def _as_index(idx, n: int) -> Index:
    return idx if isinstance(idx, Index) else Index(idx, n)


def gather_rows(x: Tensor, idx) -> Tensor:
    ix = _as_index(idx, x.shape[0])

    def back(g):
        _acc(x, np.asarray(ix.scatter @ g))

    return _node(x.value[ix.idx], (x,), back)


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Flat-index gather: out has ``idx``'s shape, ``out[...] = x.ravel()[idx]``."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.bincount(idx.ravel(), weights=g.ravel(), minlength=x.value.size)
        _acc(x, out.reshape(x.shape))

    return _node(x.value.ravel()[idx], (x,), back)


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    def back(g):
        out = np.zeros_like(x.value)
        out[lo:hi] = g
        _acc(x, out)

    return _node(x.value[lo:hi], (x,), back)


def segment_mean(edges: Tensor, receivers, n_nodes: int) -> Tensor:
    """Row i is the mean of edge rows whose receiver is i; zero if none."""
    ix = _as_index(receivers, n_nodes)
    if ix.n != n_nodes:
        raise ValueError("index built for a different node count")
    inv = ix.inv_count

    def back(g):
        _acc(edges, (g * inv)[ix.idx])

    return _node(np.asarray(ix.scatter @ edges.value) * inv, (edges,), back)


def masked_cross_entropy(
    logits: Tensor,
    mask: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Weighted mean over rows of -log softmax(logits over valid slots)[label].

    Masked slots get -inf before the softmax. ``weights`` defaults to 1/rows.
    """
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(labels))
    if not mask[rows, labels].all():
        raise ValueError("label points at a masked entry")
    if weights is None:
        weights = np.full(len(labels), 1.0 / len(labels))
    z = np.where(mask, logits.value, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.where(mask, np.exp(z), 0.0)
    denom = ez.sum(axis=1, keepdims=True)
    prob = ez / denom
    nll = np.log(denom[:, 0]) - z[rows, labels]
    loss = float(np.dot(weights, nll))

    def back(g):
        d = prob.copy()
        d[rows, labels] -= 1.0
        _acc(logits, g * d * weights[:, None])

    return _node(np.array(loss), (logits,), back)


# --- MLP -----------------------------------------------------------------


@dataclass
class MlpParams:
    """Three affine layers; ReLU after the first two."""

    weights: list[Tensor]
    biases: list[Tensor]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def tensors(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_mlp(rng: np.random.Generator, d_in: int, d_out: int, hidden: int = 16, layers: int = 3) -> MlpParams:
    dims = [d_in] + [hidden] * (layers - 1) + [d_out]
    ws = [Tensor(glorot(rng, a, b), requires_grad=True) for a, b in zip(dims[:-1], dims[1:])]
    bs = [Tensor(np.zeros(b), requires_grad=True) for b in dims[1:]]
    return MlpParams(ws, bs)


def mlp_forward(params: MlpParams, x: Tensor, first: Tensor | None = None) -> Tensor:
    """Affine-ReLU-affine-ReLU-affine.

    ``first`` optionally replaces the first layer's pre-activation (callers
    that compute ``x @ W0`` piecewise pass it in and ``x`` is ignored).
    """
    if first is None:
        if x.shape[1] != params.in_dim:
            raise ValueError(f"MLP expects width {params.in_dim}, got {x.shape[1]}")
        h = linear(x, params.weights[0], params.biases[0])
    else:
        h = first
    for w, b in zip(params.weights[1:], params.biases[1:]):
        h = linear(relu(h), w, b)
    return h


# --- Adam ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    decay: float = 0.95
    decay_every: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def current_lr(self) -> float:
        """Rate applied by the next update."""
        return self.lr * self.decay ** (self.step // self.decay_every)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """One Adam update in place, with staircase learning-rate decay."""
    lr = state.current_lr()
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.value.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
