"""Dense linear algebra with reverse-mode gradients, plus AdamW and a
finite-difference gradient checker.

All values are float64 numpy arrays of rank 2 ("matrices", row-major).
Every differentiable operation records an explicit backward rule on a
small tape of parent links; there is no general-purpose autograd beyond
what the model needs.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out.reshape(shape)


class Tensor:
    """A matrix value in the computation graph."""

    __slots__ = ("data", "grad", "parents", "_backward", "param")

    def __init__(self, data, parents=(), backward=None, param=None):
        self.data = _as_matrix(data)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite tensor value")
        self.grad: np.ndarray | None = None
        self.parents = parents if _GRAD_ENABLED else ()
        self._backward = backward if _GRAD_ENABLED else None
        self.param = param

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() on non-scalar tensor")
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        if not _GRAD_ENABLED:
            raise RuntimeError("backward() inside no_grad()")
        if self.data.size != 1:
            raise ValueError("backward() from a non-scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
            if node.param is not None:
                node.param.grad += node.grad

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad += _unbroadcast(g, b.shape)

    return Tensor(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        a.grad += _unbroadcast(g * b.data, a.shape)
        b.grad += _unbroadcast(g * a.data, b.shape)

    return Tensor(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.grad += g * s

    return Tensor(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    return Tensor(out_data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.grad += g.T

    return Tensor(a.data.T, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def backward(g):
        a.grad += g * mask

    return Tensor(a.data * mask, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a.grad += g * s * (1.0 - s)

    return Tensor(s, (a,), backward)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a, mask: np.ndarray | None = None):
    """Row-wise stable softmax.

    Accepts a Tensor (differentiable) or a plain array (returns an array).
    ``mask`` is an additive array of 0 / -inf entries applied to the logits;
    masked entries receive zero probability and zero gradient.
    """
    if not isinstance(a, Tensor):
        x = _as_matrix(a)
        if mask is not None:
            x = x + mask
        return _softmax(x)
    logits = a.data if mask is None else a.data + mask
    s = _softmax(logits)

    def backward(g):
        # ds/dx = diag(s) - s s^T per row
        dot = (g * s).sum(axis=1, keepdims=True)
        a.grad += s * (g - dot)

    return Tensor(s, (a,), backward)


def log_softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    a = as_tensor(a)
    logits = a.data if mask is None else a.data + mask
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse
    s = np.exp(out_data)

    def backward(g):
        grad = g - s * g.sum(axis=1, keepdims=True)
        if mask is not None:
            grad = np.where(np.isfinite(mask), grad, 0.0)
        a.grad += grad

    return Tensor(out_data, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.grad += np.full(a.shape, float(g.reshape(-1)[0]))

    return Tensor([[a.data.sum()]], (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by index (duplicates allowed; backward scatter-adds)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        np.add.at(a.grad, idx, g)

    return Tensor(a.data[idx], (a,), backward)


def slice_rows(a: Tensor, start: int, end: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.grad[start:end] += g

    return Tensor(a.data[start:end], (a,), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[0] for p in parts]

    def backward(g):
        ofs = 0
        for p, n in zip(parts, sizes):
            p.grad += g[ofs:ofs + n]
            ofs += n

    return Tensor(np.vstack([p.data for p in parts]), tuple(parts), backward)


def concat_cols(parts: list[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[1] for p in parts]

    def backward(g):
        ofs = 0
        for p, n in zip(parts, sizes):
            p.grad += g[:, ofs:ofs + n]
            ofs += n

    return Tensor(np.hstack([p.data for p in parts]), tuple(parts), backward)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.grad += g.reshape(a.shape)

    return Tensor(a.data.reshape(rows, cols), (a,), backward)


def block_stack(a: Tensor, spans: list[tuple[int, int]], block_len: int) -> Tensor:
    """Flatten each row-span of ``a`` into one row, zero-padded to
    block_len * cols. Overlapping spans accumulate in backward."""
    a = as_tensor(a)
    cols = a.shape[1]
    out = np.zeros((len(spans), block_len * cols))
    for i, (s, e) in enumerate(spans):
        flat = a.data[s:e].reshape(-1)
        out[i, :flat.size] = flat

    def backward(g):
        for i, (s, e) in enumerate(spans):
            n = e - s
            a.grad[s:e] += g[i, :n * cols].reshape(n, cols)

    return Tensor(out, (a,), backward)


def layer_norm_rows(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        n = a.shape[1]
        dxhat = g * gain.data
        da = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        a.grad += da
        gain.grad += _unbroadcast(g * xhat, gain.shape)
        bias.grad += _unbroadcast(g, bias.shape)

    return Tensor(out_data, (a, gain, bias), backward)


def gather_entries(a: Tensor, row_idx, col_idx) -> Tensor:
    """Pick entries (row_idx[i], col_idx[i]) into a column vector."""
    a = as_tensor(a)
    row_idx = np.asarray(row_idx, dtype=np.int64)
    col_idx = np.asarray(col_idx, dtype=np.int64)

    def backward(g):
        np.add.at(a.grad, (row_idx, col_idx), g.reshape(-1))

    return Tensor(a.data[row_idx, col_idx].reshape(-1, 1), (a,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, scale_factor: float,
              mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention; rows are tokens.

    q: (Lq, dk), k: (Lk, dk), v: (Lk, dv) -> (Lq, dv). Each output row is
    a convex combination of the rows of v.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[0] == 0:
        raise ValueError("empty attention context")
    if k.shape[0] != v.shape[0]:
        raise ValueError("key/value count mismatch")
    if q.shape[1] != k.shape[1]:
        raise ValueError("query/key width mismatch")
    logits = scale(matmul(q, transpose(k)), scale_factor)
    probs = softmax_rows(logits, mask=mask)
    return matmul(probs, v)


# -- parameters and optimization ------------------------------------------


@dataclass
class Param:
    """A named trainable matrix with a gradient slot."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = _as_matrix(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def tensor(self) -> Tensor:
        return Tensor(self.value, param=self)

    def zero_grad(self) -> None:
        self.grad[:] = 0.0


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class OptState:
    """AdamW state (decoupled weight decay)."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(opt: OptState, params) -> None:
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    for p in params:
        if p.name not in opt.m:
            opt.m[p.name] = np.zeros_like(p.value)
            opt.v[p.name] = np.zeros_like(p.value)
        m, v = opt.m[p.name], opt.v[p.name]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad ** 2
        mhat = m / bc1
        vhat = v / bc2
        p.value -= opt.learning_rate * (mhat / (np.sqrt(vhat) + opt.eps)
                                        + opt.weight_decay * p.value)


def grad_check(f, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar ``f()`` against central
    finite differences over every entry of every param.

    Returns the maximum relative error |a - n| / max(1e-8, |a| + |n|).
    """
    zero_grads(params)
    out = f()
    if not np.isfinite(out.item()):
        raise ValueError("non-finite objective")
    out.backward()
    analytic = {p.name: p.grad.copy() for p in params}
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.value.reshape(-1)
            aflat = analytic[p.name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
                worst = max(worst, err)
    return worst


# -- checkpoint io ----------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_params(path, params) -> None:
    meta = {"version": CHECKPOINT_VERSION,
            "names": [p.name for p in params],
            "shapes": {p.name: list(p.value.shape) for p in params}}
    arrays = {f"param_{i}": p.value for i, p in enumerate(params)}
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_params(path) -> list[Param]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        out = []
        for i, name in enumerate(meta["names"]):
            value = z[f"param_{i}"]
            if list(value.shape) != meta["shapes"][name]:
                raise ValueError(f"shape mismatch for {name}")
            out.append(Param(name, value))
    return out
