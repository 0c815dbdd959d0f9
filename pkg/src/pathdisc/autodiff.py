"""Dense float64 reverse-mode automatic differentiation on small matrices.

Every differentiable operation used by the encoders, the alignment score,
the losses and the agent policy lives here. Tensors wrap numpy float64
arrays (0-d, 1-d or 2-d); each non-leaf tensor records its parents and a
backward closure, and ``Tensor.backward`` replays the tape in reverse
topological order. Broadcasting is deliberately restricted to
scalar-with-tensor and equal shapes so every backward rule stays auditable.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .common import ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference-only scoring)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A float64 array plus optional gradient tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor.

        Traversal is a deterministic reverse topological order, so two runs
        on identical tapes produce bit-identical gradients.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # Operator sugar; scalars are wrapped as constant leaves.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _accumulate(t: Tensor, delta: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += delta


def _reduce_to(delta: np.ndarray, target: Tensor) -> np.ndarray:
    """Collapse a broadcast gradient back to the (scalar) operand's shape."""
    if delta.shape == target.data.shape:
        return delta
    return np.full(target.data.shape, delta.sum(), dtype=np.float64)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} are neither equal nor scalar-broadcastable")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        _accumulate(a, _reduce_to(g, a))
        _accumulate(b, _reduce_to(g, b))

    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        _accumulate(a, _reduce_to(g, a))
        _accumulate(b, _reduce_to(-g, b))

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        _accumulate(a, _reduce_to(g * b.data, a))
        _accumulate(b, _reduce_to(g * a.data, b))

    return _node(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")

    def backward(g):
        _accumulate(a, g.T)

    return _node(a.data.T.copy(), (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; branchless select keeps this fast on tiny arrays.
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)

    def backward(g):
        _accumulate(a, g * y * (1.0 - y))

    return _node(y, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - y * y))

    return _node(y, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) in overflow-free form; derivative is sigmoid(x)."""
    y = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward(g):
        _accumulate(a, g * _sigmoid(a.data))

    return _node(y, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, max-shift stabilized."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        _accumulate(a, y * (g - inner))

    return _node(y, (a,), backward)


def softmin_vec(a: Tensor) -> Tensor:
    """exp(-z_j) / sum_k exp(-z_k) over a vector, max-shift stabilized."""
    if a.data.ndim != 1:
        raise ShapeError(f"softmin_vec expects a vector, got shape {a.data.shape}")
    z = -a.data
    z -= z.max()
    e = np.exp(z)
    y = e / e.sum()

    def backward(g):
        inner = float(g @ y)
        _accumulate(a, -y * (g - inner))

    return _node(y, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return _node(np.asarray(a.data.mean()), (a,), backward)


def row_sums(a: Tensor) -> Tensor:
    """Sum each row of a matrix, yielding a vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"row_sums expects a matrix, got shape {a.data.shape}")
    cols = a.data.shape[1]

    def backward(g):
        _accumulate(a, np.repeat(g[:, None], cols, axis=1))

    return _node(a.data.sum(axis=1), (a,), backward)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack vectors or single-row matrices into a matrix, one per row."""
    if not rows:
        raise ShapeError("stack_rows needs at least one row")
    flat = [r.data.reshape(-1) for r in rows]
    width = flat[0].size
    for i, f in enumerate(flat):
        if f.size != width:
            raise ShapeError(f"stack_rows: row 0 has {width} entries but row {i} has {f.size}")
    data = np.stack(flat, axis=0)
    rows = tuple(rows)

    def backward(g):
        for i, r in enumerate(rows):
            _accumulate(r, g[i].reshape(r.data.shape))

    return _node(data, rows, backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {a.data.shape} and {b.data.shape}")
    split = a.data.shape[1]

    def backward(g):
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= lo < hi <= a.data.shape[1]):
        raise ShapeError(f"slice_cols: [{lo}:{hi}] invalid for shape {a.data.shape}")

    def backward(g):
        z = np.zeros_like(a.data)
        z[:, lo:hi] = g
        _accumulate(a, z)

    return _node(a.data[:, lo:hi].copy(), (a,), backward)


def row(a: Tensor, i: int) -> Tensor:
    """Extract row i of a matrix as a 1 x q matrix."""
    if a.data.ndim != 2 or not (0 <= i < a.data.shape[0]):
        raise ShapeError(f"row: index {i} invalid for shape {a.data.shape}")

    def backward(g):
        z = np.zeros_like(a.data)
        z[i, :] = g[0]
        _accumulate(a, z)

    return _node(a.data[i : i + 1].copy(), (a,), backward)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table; backward scatter-adds per index."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix table, got shape {table.data.shape}")
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError("take_rows expects a non-empty 1-d index array")
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise ShapeError(f"take_rows: index out of range for table with {table.data.shape[0]} rows")

    def backward(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        _accumulate(table, z)

    return _node(table.data[ids].copy(), (table,), backward)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Tile a single-row matrix k times (explicit alternative to broadcasting)."""
    if a.data.ndim != 2 or a.data.shape[0] != 1:
        raise ShapeError(f"repeat_rows expects shape (1, q), got {a.data.shape}")

    def backward(g):
        _accumulate(a, g.sum(axis=0, keepdims=True))

    return _node(np.repeat(a.data, k, axis=0), (a,), backward)


def flatten(a: Tensor) -> Tensor:
    shape = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(shape))

    return _node(a.data.reshape(-1).copy(), (a,), backward)


def pick(a: Tensor, i: int) -> Tensor:
    """Select element i of a vector as a scalar."""
    if a.data.ndim != 1 or not (0 <= i < a.data.size):
        raise ShapeError(f"pick: index {i} invalid for shape {a.data.shape}")

    def backward(g):
        z = np.zeros_like(a.data)
        z[i] = float(g)
        _accumulate(a, z)

    return _node(np.asarray(a.data[i]), (a,), backward)


def logsumexp(a: Tensor) -> Tensor:
    """log sum exp of a vector, max-shift stabilized; backward is softmax."""
    if a.data.ndim != 1:
        raise ShapeError(f"logsumexp expects a vector, got shape {a.data.shape}")
    m = a.data.max()
    e = np.exp(a.data - m)
    s = e.sum()

    def backward(g):
        _accumulate(a, float(g) * (e / s))

    return _node(np.asarray(m + np.log(s)), (a,), backward)


def lstm_step(
    x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor
) -> tuple[Tensor, Tensor]:
    """One LSTM cell step with a hand-derived fused backward rule.

    Gate order inside the 4H pre-activation block is input, forget, cell,
    output; the forget block is where init adds its +1 bias. The two outputs
    carry independent backward closures whose contributions add, which is
    valid because backprop is linear in the output gradients.
    """
    H = h.data.shape[1]
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise ShapeError(f"lstm_step: x must be (1, in), got {x.data.shape}")
    if wx.data.shape != (x.data.shape[1], 4 * H) or wh.data.shape != (H, 4 * H) or b.data.shape != (1, 4 * H):
        raise ShapeError(
            f"lstm_step: inconsistent parameter shapes wx={wx.data.shape} wh={wh.data.shape} "
            f"b={b.data.shape} for hidden size {H}"
        )
    pre = x.data @ wx.data + h.data @ wh.data + b.data
    gif = _sigmoid(pre[:, : 2 * H])
    gi = gif[:, :H]
    gf = gif[:, H:]
    gg = np.tanh(pre[:, 2 * H : 3 * H])
    go = _sigmoid(pre[:, 3 * H :])
    c_new = gf * c.data + gi * gg
    t = np.tanh(c_new)
    h_new = go * t
    parents = (x, h, c, wx, wh, b)

    def _back(dh, dc):
        dct = dc + dh * go * (1.0 - t * t)
        dpre = np.concatenate(
            [
                dct * gg * gi * (1.0 - gi),
                dct * c.data * gf * (1.0 - gf),
                dct * gi * (1.0 - gg * gg),
                dh * t * go * (1.0 - go),
            ],
            axis=1,
        )
        _accumulate(x, dpre @ wx.data.T)
        _accumulate(h, dpre @ wh.data.T)
        _accumulate(c, dct * gf)
        _accumulate(wx, x.data.T @ dpre)
        _accumulate(wh, h.data.T @ dpre)
        _accumulate(b, dpre)

    def backward_h(g):
        _back(g, np.zeros_like(c.data))

    def backward_c(g):
        _back(np.zeros_like(h.data), g)

    return _node(h_new, parents, backward_h), _node(c_new, parents, backward_c)


def reverse_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"reverse_rows expects a matrix, got shape {a.data.shape}")

    def backward(g):
        _accumulate(a, g[::-1])

    return _node(a.data[::-1].copy(), (a,), backward)


def lstm_sequence(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Full LSTM scan over stacked inputs with a hand-written BPTT backward.

    ``x`` holds one input per row; the result holds the hidden state per row.
    Functionally identical to folding ``lstm_step`` over the rows (same gate
    order, zero initial state) but it costs one tape node instead of one per
    step, which is what keeps desk-scale training in CPU minutes.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"lstm_sequence expects stacked inputs, got shape {x.data.shape}")
    H = wh.data.shape[0]
    k = x.data.shape[0]
    if wx.data.shape != (x.data.shape[1], 4 * H) or wh.data.shape != (H, 4 * H) or b.data.shape != (1, 4 * H):
        raise ShapeError(
            f"lstm_sequence: inconsistent parameter shapes wx={wx.data.shape} wh={wh.data.shape} "
            f"b={b.data.shape} for hidden size {H}"
        )
    xw = x.data @ wx.data + b.data
    gi = np.empty((k, H))
    gf = np.empty((k, H))
    gg = np.empty((k, H))
    go = np.empty((k, H))
    cs = np.empty((k, H))
    ts = np.empty((k, H))
    hs = np.empty((k, H))
    h_prev = np.zeros((1, H))
    c_prev = np.zeros((1, H))
    for t in range(k):
        pre = xw[t : t + 1] + h_prev @ wh.data
        gif = _sigmoid(pre[:, : 2 * H])  # input and forget gates share one call
        gi[t] = gif[:, :H]
        gf[t] = gif[:, H:]
        gg[t] = np.tanh(pre[:, 2 * H : 3 * H])
        go[t] = _sigmoid(pre[:, 3 * H :])
        cs[t] = gf[t] * c_prev[0] + gi[t] * gg[t]
        ts[t] = np.tanh(cs[t])
        hs[t] = go[t] * ts[t]
        h_prev = hs[t : t + 1]
        c_prev = cs[t : t + 1]

    def backward(g):
        dpre = np.empty((k, 4 * H))
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for t in range(k - 1, -1, -1):
            dh = g[t] + dh_next
            dct = dc_next + dh * go[t] * (1.0 - ts[t] * ts[t])
            c_before = cs[t - 1] if t > 0 else np.zeros(H)
            dpre[t, :H] = dct * gg[t] * gi[t] * (1.0 - gi[t])
            dpre[t, H : 2 * H] = dct * c_before * gf[t] * (1.0 - gf[t])
            dpre[t, 2 * H : 3 * H] = dct * gi[t] * (1.0 - gg[t] * gg[t])
            dpre[t, 3 * H :] = dh * ts[t] * go[t] * (1.0 - go[t])
            dh_next = dpre[t] @ wh.data.T
            dc_next = dct * gf[t]
        _accumulate(x, dpre @ wx.data.T)
        _accumulate(wx, x.data.T @ dpre)
        h_before = np.vstack([np.zeros((1, H)), hs[:-1]])
        _accumulate(wh, h_before.T @ dpre)
        _accumulate(b, dpre.sum(axis=0, keepdims=True))

    return _node(hs, (x, wx, wh, b), backward)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 3e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| divided by
    max(1e-8, |analytic| + |numeric|). ``f`` must rebuild its value from the
    current contents of ``params`` on every call.

    The default step balances truncation against f64 cancellation: central
    differencing a function of magnitude |f| carries ~1e-16 |f| / eps of
    rounding noise, which the 1e-8 denominator floor turns into a relative
    error of ~1e-8 |f| / eps on near-zero-gradient coordinates. eps = 3e-4
    keeps that under 1e-4 for |f| up to ~3 (typical losses here), while the
    eps^2 truncation term stays orders of magnitude below 1e-4 for smooth
    sigmoid/tanh compositions. Much smaller steps make exact gradients fail
    the tolerance on dead coordinates.
    """
    zero_grads(params)
    out = f()
    if out.data.size != 1:
        raise ShapeError("grad_check: f must be scalar-valued")
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: non-finite function value at the evaluation point")
    out.backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f().data)
                flat[i] = orig - eps
                down = float(f().data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise ValueError("grad_check: non-finite evaluation during differencing")
                num[i] = (up - down) / (2.0 * eps)
            rel = np.abs(an.reshape(-1) - num) / np.maximum(1e-8, np.abs(an.reshape(-1)) + np.abs(num))
            if rel.size:
                worst = max(worst, float(rel.max()))
    return worst
