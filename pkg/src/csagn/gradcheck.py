"""Finite-difference checks for every tensor op and for the composed
encoder -> graph -> loss pipeline."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .corpus import ArgumentSpan, Conversation, Frame, Utterance
from .encoder import Vocab
from .model import CSAGN, ModelConfig, Switches
from .tensor import Tensor

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]


def _leaf(rng, *shape, low=None) -> Tensor:
    data = rng.normal(size=shape)
    if low is not None:
        # keep values away from kinks at zero
        data = np.sign(data) * (np.abs(data) + low)
    return Tensor(data, requires_grad=True)


def _probe(rng, out_shape) -> np.ndarray:
    return rng.normal(size=out_shape)


def _reduce(x: Tensor, probe: np.ndarray) -> Tensor:
    return T.sum_(x * probe)


def _unary(op, low=None):
    def case(rng):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        x = _leaf(rng, *shape, low=low)
        w = _probe(rng, shape)
        return (lambda: _reduce(op(x), w)), {"x": x}

    return case


def _binary(op):
    def case(rng):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        # second operand broadcasts along a random subset of axes
        bshape = tuple(1 if rng.random() < 0.4 else s for s in shape)
        a, b = _leaf(rng, *shape), _leaf(rng, *bshape)
        w = _probe(rng, shape)
        return (lambda: _reduce(op(a, b), w)), {"a": a, "b": b}

    return case


def _matmul(rng):
    batch = tuple(rng.integers(1, 4, size=rng.integers(0, 3)))
    n, k, m = rng.integers(1, 6, size=3)
    a = _leaf(rng, *batch, n, k)
    b = _leaf(rng, k, m) if rng.random() < 0.5 else _leaf(rng, *batch, k, m)
    w = _probe(rng, (*batch, n, m))
    return (lambda: _reduce(T.matmul(a, b), w)), {"a": a, "b": b}


def _concat(rng):
    axis = int(rng.integers(0, 2))
    shapes = [[int(rng.integers(1, 4)), 3] if axis == 0 else [3, int(rng.integers(1, 4))] for _ in range(3)]
    xs = [_leaf(rng, *s) for s in shapes]
    out_shape = np.concatenate([x.data for x in xs], axis=axis).shape
    w = _probe(rng, out_shape)
    return (lambda: _reduce(T.concat(xs, axis=axis), w)), {f"x{i}": x for i, x in enumerate(xs)}


def _reshape_transpose(rng):
    x = _leaf(rng, 2, 3, 4)
    axes = tuple(rng.permutation(3))
    w = _probe(rng, (4, 6))
    return (lambda: _reduce(T.reshape(T.transpose(x, axes), (4, 6)), w)), {"x": x}


def _sum(rng):
    x = _leaf(rng, 3, 4, 2)
    axis = int(rng.integers(0, 3))
    keep = bool(rng.random() < 0.5)
    w = _probe(rng, x.data.sum(axis=axis, keepdims=keep).shape)
    return (lambda: _reduce(T.sum_(x, axis=axis, keepdims=keep), w)), {"x": x}


def _softmax(rng):
    n, m = rng.integers(1, 6, size=2)
    x = _leaf(rng, n, m)
    mask = rng.random((n, m)) < 0.7
    mask[np.arange(n), rng.integers(0, m, size=n)] = True
    w = _probe(rng, (n, m))
    return (lambda: _reduce(T.softmax(x, axis=-1, mask=mask), w)), {"x": x}


def _layer_norm(rng):
    n, d = rng.integers(1, 5), rng.integers(2, 6)
    x, gain, bias = _leaf(rng, n, d), _leaf(rng, d), _leaf(rng, d)
    w = _probe(rng, (n, d))
    return (lambda: _reduce(T.layer_norm(x, gain, bias), w)), {"x": x, "gain": gain, "bias": bias}


def _max_pool(rng):
    n, d = rng.integers(2, 9), rng.integers(1, 5)
    x = _leaf(rng, n, d)
    segs = rng.integers(-1, 3, size=n)
    w = _probe(rng, (3, d))
    return (lambda: _reduce(T.max_pool_segments(x, segs, 3), w)), {"x": x}


def _take_rows(rng):
    m, d = rng.integers(2, 6), rng.integers(1, 4)
    table = _leaf(rng, m, d)
    idx = rng.integers(0, m, size=rng.integers(1, 8))
    w = _probe(rng, (len(idx), d))
    return (lambda: _reduce(T.take_rows(table, idx), w)), {"table": table}


def _cross_entropy(rng):
    n, c = rng.integers(1, 6), rng.integers(2, 6)
    logits = _leaf(rng, n, c)
    targets = rng.integers(0, c, size=n)
    weights = rng.random(n).round()
    return (lambda: T.cross_entropy(logits, targets, weights)), {"logits": logits}


def _scale(rng):
    factor = float(rng.normal())
    return _unary(lambda x: T.scale(x, factor))(rng)


OP_CASES: dict[str, Case] = {
    "matmul": _matmul,
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "abs": _unary(T.abs_, low=0.05),
    "relu": _unary(T.relu, low=0.05),
    "exp": _unary(T.exp),
    "scale": _scale,
    "concat": _concat,
    "reshape_transpose": _reshape_transpose,
    "sum": _sum,
    "softmax": _softmax,
    "layer_norm": _layer_norm,
    "max_pool_segments": _max_pool,
    "take_rows": _take_rows,
    "cross_entropy": _cross_entropy,
}


def check_op(name: str, seed: int, tol: float = 1e-4) -> dict:
    rng = np.random.default_rng(seed)
    f, params = OP_CASES[name](rng)
    return T.grad_check(f, params, tol=tol)


# ---------------------------------------------------------------------------
# composed pipeline


def random_instance(rng: np.random.Generator, max_utts: int = 4, max_len: int = 4) -> tuple[Conversation, Frame]:
    """Small random two-speaker conversation with one predicate and up to
    three non-overlapping arguments."""
    k = int(rng.integers(1, max_utts + 1))
    words = ["a", "b", "c", "d", "e", "f"]
    utts = []
    for i in range(k):
        n = int(rng.integers(1, max_len + 1))
        utts.append(Utterance(i, int(rng.integers(0, 2)), tuple(rng.choice(words, size=n))))
    # first-appearance speaker ids
    remap: dict[int, int] = {}
    utts = [Utterance(u.index, remap.setdefault(u.speaker, len(remap)), u.tokens) for u in utts]
    conv = Conversation("rand", tuple(utts), len(remap))
    kp = int(rng.integers(0, k))
    ps = int(rng.integers(0, len(utts[kp].tokens)))
    frame_args = []
    taken = {kp: {ps}}
    roles = ["ARG0", "ARG1", "ARGM-TMP"]
    for _ in range(3):
        ku = int(rng.integers(0, k))
        n = len(utts[ku].tokens)
        s = int(rng.integers(0, n))
        e = int(rng.integers(s + 1, n + 1))
        used = taken.setdefault(ku, set())
        if used & set(range(s, e)):
            continue
        used.update(range(s, e))
        frame_args.append(ArgumentSpan(ku, s, e, roles[int(rng.integers(0, 3))]))
    return conv, Frame(kp, (ps, ps + 1), tuple(sorted(frame_args)))


def pipeline_case(seed: int, switches: Switches = Switches(), learnable_norm: bool = False):
    """Tiny CSAGN on one random instance; returns (loss_fn, params)."""
    rng = np.random.default_rng(seed)
    conv, frame = random_instance(rng)
    vocab = Vocab(conv.flat_tokens())
    config = ModelConfig(d_enc=8, d_graph=6, num_blocks=4, num_heads=2, max_len=32, learnable_norm=learnable_norm)
    model = CSAGN(vocab, ("ARG0", "ARG1", "ARGM-TMP"), config, seed=seed)
    batch = model.batch([model.features(conv, frame, switches)])

    def loss():
        return model.forward(batch, switches).loss

    return loss, model.named_parameters()


def check_pipeline(seed: int, tol: float = 1e-4, max_entries: int | None = 6, **kwargs) -> dict:
    f, params = pipeline_case(seed, **kwargs)
    return T.grad_check(f, params, tol=tol, max_entries=max_entries, rng=np.random.default_rng(seed))
