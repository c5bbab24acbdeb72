"""Dense reverse-mode automatic differentiation over numpy arrays.

Every op builds a node holding its parents and a closure that pushes the
output gradient back to them. ``backward`` walks the recorded graph once in
reverse topological order. Leaf tensors accumulate ``grad`` across calls;
intermediate gradients are rebuilt on every call.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
CHECKPOINT_MAGIC = "CSAGN-CKPT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self._op or 'leaf'})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return abs_(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # gradients are never updated in place, so intermediates may alias g
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE) if t.is_leaf else g
    else:
        t.grad = t.grad + g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def backward(g):
        _accumulate(a, g * factor)

    return _node(a.data * factor, (a,), backward, "scale")


def abs_(a) -> Tensor:
    # subgradient 0 at the origin
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), backward, "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _node(out, (a,), backward, "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return _node(out, (a,), backward, "exp")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(out, (a,), backward, "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if not axes else tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backward, "transpose")


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=ax)):
            _accumulate(t, piece)

    return _node(out, ts, backward, "concat")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(out, (a,), backward, "sum")


def take_rows(table, index) -> Tensor:
    """Gather rows of a 2-D table; repeated indices accumulate on backward."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: index out of range for table {table.shape}")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        _accumulate(table, gt)

    return _node(table.data[index], (table,), backward, "take_rows")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """Batched matrix product on the trailing two axes (numpy semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            if a.ndim == 2 and g.ndim > 2:
                ga = np.einsum("...ik,...jk->ij", g, np.broadcast_to(b.data, g.shape[:-2] + b.shape[-2:]))
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            _accumulate(a, ga)
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                # fold the batch axes into one product instead of summing per-batch outer products
                a2 = np.broadcast_to(a.data, g.shape[:-2] + a.shape[-2:]).reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            _accumulate(b, gb)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; ``mask`` False entries get exactly zero weight.

    Every slice along ``axis`` must keep at least one unmasked entry.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax: a masked slice has no admissible entry")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _node(out, (a,), backward, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply an affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=lead))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, dx)

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def max_pool_segments(x, segment_ids, num_segments: int | None = None) -> Tensor:
    """Per-dimension max of the rows of ``x`` sharing a segment id.

    Rows with a negative id are ignored; empty segments yield zeros. Ties go
    to the lowest row index, and the backward pass routes each output
    gradient to that single row.
    """
    x = as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if x.ndim != 2 or seg.shape != (x.shape[0],):
        raise ShapeError(f"max_pool_segments: rows {x.shape} vs segment ids {seg.shape}")
    if num_segments is None:
        num_segments = int(seg.max()) + 1 if seg.size else 0
    n, d = x.shape
    keep = seg >= 0
    rows = np.nonzero(keep)[0]
    s = seg[keep]
    vals = x.data[keep]
    best = np.full((num_segments, d), -np.inf)
    np.maximum.at(best, s, vals)
    cand = np.where(vals == best[s], rows[:, None], n)
    argrow = np.full((num_segments, d), n, dtype=np.int64)
    np.minimum.at(argrow, s, cand)
    filled = argrow < n
    out = np.where(filled, best, 0.0)

    def backward(g):
        gx = np.zeros_like(x.data)
        seg_idx, dim_idx = np.nonzero(filled)
        np.add.at(gx, (argrow[seg_idx, dim_idx], dim_idx), g[seg_idx, dim_idx])
        _accumulate(x, gx)

    return _node(out, (x,), backward, "max_pool_segments")


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under row-wise softmax.

    ``weights`` scales each row's term; zero-weight rows contribute nothing
    (their targets must still be valid class indices).
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    c = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ShapeError(f"cross_entropy: target outside [0, {c})")
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=DTYPE)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    rows = np.arange(len(targets))
    nll = lse - z[rows, targets]
    active = w != 0
    loss = float((w[active] * nll[active]).sum())

    def backward(g):
        probs = np.exp(z - lse[:, None])
        probs[rows, targets] -= 1.0
        _accumulate(logits, g * w[:, None] * probs)

    return _node(np.array(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# graph traversal


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    if loss.is_leaf:
        _accumulate(loss, np.ones_like(loss.data))
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


Tensor.backward = backward  # type: ignore[attr-defined]


# ---------------------------------------------------------------------------
# finite-difference check


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict:
    """Compare analytic gradients against central finite differences.

    ``f`` recomputes the scalar loss from the current parameter values. The
    relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_entries`` only that many randomly chosen entries per parameter are
    probed.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    errors: dict[str, float] = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        errors[name] = worst
    for p in params.values():
        p.zero_grad()
    max_err = max(errors.values(), default=0.0)
    return {"max_rel_error": errors, "worst": max_err, "passed": max_err < tol, "tol": tol}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor], meta: dict | None = None) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in params.items()
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic header)")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    arrays = {
        name: np.asarray(entry["values"], dtype=DTYPE).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return arrays, payload.get("meta", {})


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a dataclass tree of Tensors (lists allowed) into dotted names."""
    from dataclasses import fields, is_dataclass

    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif is_dataclass(obj):
        for f in fields(obj):
            out.update(named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_tensors(item, f"{prefix}.{i}"))
    return out
