"""Training loop, micro-F1 evaluation with intra/cross decomposition, and
the ablation runner."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .corpus import ArgumentSpan, Conversation, Frame
from .encoder import Vocab
from .model import CSAGN, SWITCHES, ModelConfig, Switches
from .objectives import LossWeights

log = logging.getLogger(__name__)

Instance = tuple[Conversation, Frame]


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    epochs: int = 50
    seed: int = 0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    window: int | None = 4
    d_graph: int = 100
    d_enc: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    num_speakers: int = 2
    learnable_norm: bool = False
    reduction: str = "sum"
    clip_norm: float = 5.0
    patience: int = 10
    full_attention: bool = False
    no_sagn: bool = False
    no_predicate_rep: bool = False
    no_speaker_dep: bool = False
    no_predicate_dep: bool = False
    srl_only: bool = False
    no_intra_obj: bool = False
    no_ut_obj: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        LossWeights(*self.loss_weights)

    @property
    def switches(self) -> Switches:
        return Switches(**{name: getattr(self, name) for name in SWITCHES})

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_enc=self.d_enc,
            d_graph=self.d_graph,
            num_blocks=self.num_blocks,
            num_heads=self.num_heads,
            window=self.window,
            num_speakers=self.num_speakers,
            learnable_norm=self.learnable_norm,
            reduction=self.reduction,
        )

    def with_switch(self, name: str | None) -> "TrainConfig":
        on = Switches.only(name).active()
        return replace(self, **{s: s in on for s in SWITCHES})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class Metrics:
    all: Counts = field(default_factory=Counts)
    intra: Counts = field(default_factory=Counts)
    cross: Counts = field(default_factory=Counts)

    @property
    def f1_all(self) -> float:
        return self.all.f1

    @property
    def f1_intra(self) -> float:
        return self.intra.f1

    @property
    def f1_cross(self) -> float:
        return self.cross.f1

    def to_dict(self, counts: bool = True) -> dict:
        out = {}
        for part in ("all", "intra", "cross"):
            c = getattr(self, part)
            out[part] = {"precision": c.precision, "recall": c.recall, "f1": c.f1}
            if counts:
                out[part].update(tp=c.tp, fp=c.fp, fn=c.fn)
        return out

    def summary(self) -> dict:
        return {"f1_all": self.f1_all, "f1_intra": self.f1_intra, "f1_cross": self.f1_cross}


def _tuples(index: int, frame: Frame, spans: Iterable[ArgumentSpan]) -> set[tuple]:
    pred = (index, frame.predicate_utt, *frame.predicate_span)
    return {(pred, (a.utt_index, a.start, a.end), a.role) for a in spans}


def score(gold: Sequence[Instance], predictions: Sequence[Iterable[ArgumentSpan]]) -> Metrics:
    """Micro P/R/F1 over (predicate, argument, role) tuples.

    A tuple is intra when its argument sits in the predicate's utterance and
    cross otherwise; the two parts partition the raw counts of ``all``.
    """
    if len(gold) != len(predictions):
        raise ValueError(f"{len(predictions)} predictions for {len(gold)} gold instances")
    m = Metrics()
    for i, ((_, frame), pred) in enumerate(zip(gold, predictions)):
        g = _tuples(i, frame, frame.arguments)
        p = _tuples(i, frame, pred)
        for part, keep in (("intra", True), ("cross", False)):
            gp = {t for t in g if (t[1][0] == frame.predicate_utt) == keep}
            pp = {t for t in p if (t[1][0] == frame.predicate_utt) == keep}
            c = getattr(m, part)
            c.tp += len(gp & pp)
            c.fp += len(pp - gp)
            c.fn += len(gp - pp)
    m.all = m.intra + m.cross
    return m


def evaluate(dataset: Sequence[Instance], model: CSAGN, switches: Switches = Switches(), batch_size: int = 128) -> Metrics:
    return score(dataset, model.predict(dataset, switches, batch_size))


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: dict[str, T.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad**2
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(params: Iterable[T.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


@dataclass
class TrainResult:
    model: CSAGN
    log: list[dict]
    best_epoch: int
    best_dev: Metrics | None


def build_model(train_set: Sequence[Instance], roles: Sequence[str], config: TrainConfig) -> CSAGN:
    vocab = Vocab.from_conversations(conv for conv, _ in train_set)
    return CSAGN(vocab, roles, config.model_config(), seed=config.seed)


def train(
    train_set: Sequence[Instance],
    config: TrainConfig,
    roles: Sequence[str] | None = None,
    dev_set: Sequence[Instance] | None = None,
    model: CSAGN | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Fit a model; keeps the parameters of the best dev epoch when a dev set
    is given and stops after ``config.patience`` epochs without improvement."""
    if not train_set:
        raise ValueError("train set is empty")
    if roles is None:
        roles = list(dict.fromkeys(a.role for _, f in train_set for a in f.arguments))
    switches = config.switches
    weights = switches.loss_weights(LossWeights(*config.loss_weights))
    model = model or build_model(train_set, roles, config)
    params = model.named_parameters()
    opt = Adam(params, config.lr)
    feats = [model.features(c, f, switches) for c, f in train_set]
    order_rng = random.Random(config.seed)
    history: list[dict] = []
    best_state, best_f1, best_epoch, best_dev = None, -1.0, 0, None
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = list(range(len(feats)))
        order_rng.shuffle(order)
        sums = {"l_srl": 0.0, "l_intra": 0.0, "l_ut": 0.0, "loss": 0.0}
        for start in range(0, len(order), config.batch_size):
            batch = model.batch([feats[i] for i in order[start : start + config.batch_size]])
            model.zero_grad()
            try:
                out = model.forward(batch, switches, LossWeights(*config.loss_weights))
            except ValueError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from None
            for key in sums:
                sums[key] += getattr(out, key).item()
            if not math.isfinite(out.loss.item()):
                raise TrainingDiverged(f"epoch {epoch}: loss is {out.loss.item()}")
            T.backward(out.loss)
            clip_grad_norm(params.values(), config.clip_norm)
            opt.step()
        entry: dict = {"epoch": epoch, **sums}
        entry["weighted"] = {"srl": weights.srl, "intra": weights.intra, "ut": weights.ut}
        if dev_set:
            dev = evaluate(dev_set, model, switches, config.batch_size)
            entry["dev"] = dev.summary()
            if dev.f1_all > best_f1:
                best_f1, best_epoch, best_dev, best_state = dev.f1_all, epoch, dev, model.state()
                stale = 0
            else:
                stale += 1
        history.append(entry)
        log.info("epoch %d loss %.4f dev %s", epoch, sums["loss"], entry.get("dev"))
        if on_epoch:
            on_epoch(entry)
        if dev_set and config.patience and stale >= config.patience:
            break
    if best_state is not None:
        model.load_state(best_state)
    else:
        best_epoch = len(history)
    return TrainResult(model, history, best_epoch, best_dev)


def run_ablation(
    train_set: Sequence[Instance],
    test_set: Sequence[Instance],
    config: TrainConfig,
    switch: str,
    roles: Sequence[str] | None = None,
    dev_set: Sequence[Instance] | None = None,
    include_baseline: bool = True,
) -> dict[str, Metrics]:
    """Train the full model and the model with one switch on, same seed, and
    score both on ``test_set``."""
    if switch not in SWITCHES:
        raise ValueError(f"unknown ablation switch {switch!r}; expected one of {SWITCHES}")
    table: dict[str, Metrics] = {}
    variants = (["baseline"] if include_baseline else []) + [switch]
    for name in variants:
        cfg = config.with_switch(None if name == "baseline" else name)
        result = train(train_set, cfg, roles, dev_set)
        table[name] = evaluate(test_set, result.model, cfg.switches, cfg.batch_size)
    return table
