"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is 2-D (or scalar) on purpose: no batch dimensions, no
broadcasting beyond row-wise bias addition, loud shape errors. Ops record
their parents and a backward closure on the output tensor; ``backward``
linearizes the graph into a ``Tape`` and replays it in reverse. Gradients
accumulate (add, never assign) until ``zero_grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A float64 array, an optional gradient buffer, and graph bookkeeping.

    Tensors built by the ops below never alias or mutate their inputs; the
    only sanctioned in-place mutation is the optimizer's parameter update.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ContractError("tensor data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...] = (), backward_fn=None) -> Tensor:
    if not np.isfinite(data).all():
        raise ContractError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if backward_fn is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


@dataclass
class TapeRecord:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward_fn: Callable


@dataclass
class Tape:
    """Operations in topological order: every record's inputs precede it."""

    records: list[TapeRecord]

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        records: list[TapeRecord] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                if node._backward_fn is not None:
                    records.append(TapeRecord(node, node._parents, node._backward_fn))
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(records)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dt into ``t.grad`` for every reachable trainable tensor.

    Repeated calls without ``zero_grad`` keep adding: two identical backward
    passes double every gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward_fn is None:
        raise ContractError("loss was not produced by taped operations")
    tape = Tape.from_root(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        out_grad = flowing.get(id(rec.out))
        if out_grad is None:
            continue
        for parent, contrib in zip(rec.parents, rec.backward_fn(out_grad)):
            if contrib is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + contrib
            else:
                flowing[key] = contrib
                holders[key] = parent
    for key, tensor in holders.items():
        if tensor.requires_grad:
            grad = flowing[key]
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias added to every row of a matrix."""
    if a.data.shape == b.data.shape:
        def backward_fn(g):
            return (g if a.requires_grad else None, g if b.requires_grad else None)

        return _make(a.data + b.data, (a, b), backward_fn)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        def backward_fn(g):
            return (g if a.requires_grad else None,
                    g.sum(axis=0) if b.requires_grad else None)

        return _make(a.data + b.data, (a, b), backward_fn)
    raise DimensionError(f"add shapes {a.data.shape} and {b.data.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shapes {a.data.shape} and {b.data.shape}")

    def backward_fn(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward_fn(g):
        return (g * factor,)

    return _make(x.data * factor, (x,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs matrices, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")

    def backward_fn(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), backward_fn)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {x.data.shape}")

    def backward_fn(g):
        return (g.T,)

    return _make(np.ascontiguousarray(x.data.T), (x,), backward_fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    width = parts[0].data.shape
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != width[1]:
            raise DimensionError(f"concat_rows widths differ: {width} vs {p.data.shape}")
    sizes = [p.data.shape[0] for p in parts]

    def backward_fn(g):
        grads = []
        offset = 0
        for p, rows in zip(parts, sizes):
            grads.append(g[offset:offset + rows] if p.requires_grad else None)
            offset += rows
        return tuple(grads)

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward_fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one tensor")
    height = parts[0].data.shape
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != height[0]:
            raise DimensionError(f"concat_cols heights differ: {height} vs {p.data.shape}")
    sizes = [p.data.shape[1] for p in parts]

    def backward_fn(g):
        grads = []
        offset = 0
        for p, cols in zip(parts, sizes):
            grads.append(g[:, offset:offset + cols] if p.requires_grad else None)
            offset += cols
        return tuple(grads)

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward_fn)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[0]):
        raise DimensionError(f"slice_rows [{start}:{stop}] of {x.data.shape}")

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop].copy(), (x,), backward_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[1]):
        raise DimensionError(f"slice_cols [{start}:{stop}] of {x.data.shape}")

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), backward_fn)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the gathered rows."""
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be a matrix, got {table.data.shape}")
    if len(ids) == 0:
        raise ContractError("embedding_lookup needs at least one id")
    rows = table.data.shape[0]
    for i in ids:
        if not (0 <= int(i) < rows):
            raise ContractError(f"token id {i} outside table with {rows} rows")
    idx = np.asarray(list(ids), dtype=np.int64)

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx].copy(), (table,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (np.full_like(x.data, float(g)),)

    return _make(np.array(x.data.sum()), (x,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation used by GPT-family models."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
        return (g * d,)

    return _make(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    out = np.where(x.data >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(x.data))),
                   np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward_fn(g):
        return (g * (1.0 - out ** 2),)

    return _make(out, (x,), backward_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by max subtraction; rows sum to 1."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm needs a matrix, got {x.data.shape}")
    n = x.data.shape[1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise DimensionError(f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} for width {n}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            # standard layer-norm backward over each row
            gx = inv * (dxhat
                        - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        ggain = (g * xhat).sum(axis=0) if gain.requires_grad else None
        gbias = g.sum(axis=0) if bias.requires_grad else None
        return (gx, ggain, gbias)

    return _make(out, (x, gain, bias), backward_fn)


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood over masked positions.

    Masked-out rows contribute exactly zero loss and zero gradient; their
    target ids are never read by any float operation.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy needs a logits matrix, got {logits.data.shape}")
    t, v = logits.data.shape
    if len(targets) != t or len(mask) != t:
        raise ContractError(f"targets/mask length must be {t}, got {len(targets)}/{len(mask)}")
    for i in targets:
        if not (0 <= int(i) < v):
            raise ContractError(f"target id {i} outside vocabulary of size {v}")
    rows = np.flatnonzero(np.asarray(mask, dtype=bool))
    if rows.size == 0:
        raise ContractError("cross_entropy mask selects no positions")
    picked = np.asarray([int(targets[r]) for r in rows], dtype=np.int64)
    sub = logits.data[rows]
    m = sub.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(sub - m).sum(axis=1))
    logp = sub[np.arange(rows.size), picked] - lse
    loss = -logp.mean()

    def backward_fn(g):
        probs = np.exp(sub - lse[:, None])
        probs[np.arange(rows.size), picked] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = probs / rows.size
        return (full * float(g),)

    return _make(np.array(loss), (logits,), backward_fn)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter identity."""

    step_count: int = 0
    first: dict[int, np.ndarray] = field(default_factory=dict)
    second: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update applied to exactly the listed params."""
    for p in params:
        if p.grad is None:
            raise ContractError("adam_step: parameter has no gradient; call backward first")
    b1, b2 = betas
    state.step_count += 1
    t = state.step_count
    for p in params:
        key = id(p)
        m = state.first.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            state.first[key] = m
            state.second[key] = np.zeros_like(p.data)
        v = state.second[key]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad ** 2
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# bidirectional LSTM (prompt reparametrization)


@dataclass
class LstmDirectionWeights:
    """One direction's gate parameters, gates ordered input, forget, cell, output."""

    w_x: Tensor
    w_h: Tensor
    bias: Tensor


@dataclass
class BiLstmWeights:
    fwd: LstmDirectionWeights
    bwd: LstmDirectionWeights
    hidden: int

    @classmethod
    def create(cls, d_in: int, hidden: int, rng: np.random.Generator,
               std: float = 0.02, trainable: bool = True) -> "BiLstmWeights":
        def direction():
            return LstmDirectionWeights(
                w_x=Tensor(rng.normal(0.0, std, size=(d_in, 4 * hidden)), requires_grad=trainable),
                w_h=Tensor(rng.normal(0.0, std, size=(hidden, 4 * hidden)), requires_grad=trainable),
                bias=Tensor(np.zeros(4 * hidden), requires_grad=trainable),
            )

        return cls(fwd=direction(), bwd=direction(), hidden=hidden)

    def parameters(self) -> list[Tensor]:
        return [self.fwd.w_x, self.fwd.w_h, self.fwd.bias,
                self.bwd.w_x, self.bwd.w_h, self.bwd.bias]


def _lstm_direction(rows: list[Tensor], weights: LstmDirectionWeights, hidden: int) -> list[Tensor]:
    h = Tensor(np.zeros((1, hidden)))
    c = Tensor(np.zeros((1, hidden)))
    outputs = []
    for x_t in rows:
        z = add(add(matmul(x_t, weights.w_x), matmul(h, weights.w_h)), weights.bias)
        i = sigmoid(slice_cols(z, 0, hidden))
        f = sigmoid(slice_cols(z, hidden, 2 * hidden))
        g = tanh(slice_cols(z, 2 * hidden, 3 * hidden))
        o = sigmoid(slice_cols(z, 3 * hidden, 4 * hidden))
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
        outputs.append(h)
    return outputs


def lstm_bidirectional(seq: Tensor, weights: BiLstmWeights) -> Tensor:
    """Run the LSTM recurrence both ways over ``seq`` and concatenate per position."""
    if seq.data.ndim != 2 or seq.data.shape[0] < 1:
        raise DimensionError(f"lstm_bidirectional needs a non-empty sequence, got {seq.data.shape}")
    length = seq.data.shape[0]
    rows = [slice_rows(seq, t, t + 1) for t in range(length)]
    fwd_out = _lstm_direction(rows, weights.fwd, weights.hidden)
    bwd_out = _lstm_direction(rows[::-1], weights.bwd, weights.hidden)[::-1]
    return concat_cols([concat_rows(fwd_out), concat_rows(bwd_out)])
