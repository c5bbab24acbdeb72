"""Training objectives (SRL tagging, intra-argument tagging, utterance type)
and greedy decoding back to argument spans."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import UTTERANCE_TYPES, ArgumentSpan, TagSequence, bio_to_spans, repair_bio
from .tensor import Tensor


@dataclass
class HeadParams:
    w_srl: Tensor
    b_srl: Tensor
    w_intra: Tensor
    b_intra: Tensor
    w_ut: Tensor
    b_ut: Tensor

    @property
    def num_labels(self) -> int:
        return self.w_srl.shape[1]


@dataclass(frozen=True)
class LossWeights:
    srl: float = 1.0
    intra: float = 1.0
    ut: float = 1.0

    def __post_init__(self):
        for name in ("srl", "intra", "ut"):
            value = getattr(self, name)
            if not value >= 0 or not math.isfinite(value):
                raise ValueError(f"loss weight {name}={value} must be finite and nonnegative")


def init_heads(rng: np.random.Generator, num_labels: int, d_enc: int = 64, d_graph: int = 100) -> HeadParams:
    def mat(n_in, n_out):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)), requires_grad=True)

    def bias(n):
        return Tensor(np.zeros(n), requires_grad=True)

    return HeadParams(
        w_srl=mat(d_enc + d_graph, num_labels),
        b_srl=bias(num_labels),
        w_intra=mat(4 * d_enc, num_labels),
        b_intra=bias(num_labels),
        w_ut=mat(2 * d_graph, len(UTTERANCE_TYPES)),
        b_ut=bias(len(UTTERANCE_TYPES)),
    )


def encode_labels(tags: TagSequence | Sequence[str], labels: Sequence[str]) -> np.ndarray:
    index = {lab: i for i, lab in enumerate(labels)}
    seq = tags.labels if isinstance(tags, TagSequence) else tags
    try:
        return np.array([index[t] for t in seq], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"tag {exc.args[0]!r} is not in the label inventory") from None


def _reduce(loss: Tensor, weights, reduction: str) -> Tensor:
    if reduction == "sum":
        return loss
    if reduction == "mean":
        total = float(np.sum(weights))
        return T.scale(loss, 1.0 / total) if total > 0 else loss
    raise ValueError(f"unknown reduction {reduction!r}")


def _check_targets(targets: np.ndarray, num_labels: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= num_labels):
        raise ValueError(f"tag id outside the label inventory [0, {num_labels})")
    return targets


def srl_logits(p: Tensor, h: Tensor, token_utt: Sequence[int], params: HeadParams) -> Tensor:
    """Label scores from ``[p_t ; h_k(t)]`` for every token row of ``p``."""
    h_tok = T.take_rows(h, token_utt)
    return T.concat([p, h_tok], axis=-1) @ params.w_srl + params.b_srl


def srl_loss(
    p: Tensor,
    h: Tensor,
    targets,
    token_utt: Sequence[int],
    params: HeadParams,
    weights=None,
    reduction: str = "sum",
) -> Tensor:
    """Negative log-likelihood of the gold tag of every token.

    ``p`` is ``n x d_enc``, ``h`` is ``K x d_graph`` and ``token_utt[t]`` is
    the row of ``h`` paired with token t. ``weights`` masks padding rows.
    """
    targets = _check_targets(targets, params.num_labels)
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=float)
    loss = T.cross_entropy(srl_logits(p, h, token_utt, params), targets, w)
    return _reduce(loss, w, reduction)


def intra_features(e: Tensor, p: Tensor) -> Tensor:
    return T.concat([p, abs(p - e), p * e, e], axis=-1)


def intra_loss(e: Tensor, p: Tensor, targets, intra_mask, params: HeadParams, reduction: str = "sum") -> Tensor:
    """Tagging loss from ``[p, |p-e|, p*e, e]`` restricted to intra-argument tokens."""
    targets = _check_targets(targets, params.num_labels)
    w = np.asarray(intra_mask, dtype=float)
    logits = intra_features(e, p) @ params.w_intra + params.b_intra
    return _reduce(T.cross_entropy(logits, targets, w), w, reduction)


def utterance_type_loss(g: Tensor, h: Tensor, utt_types, params: HeadParams, weights=None) -> Tensor:
    """Three-way utterance classification from ``[g_k ; h_k]``, summed over K."""
    targets = _check_targets(utt_types, len(UTTERANCE_TYPES))
    logits = T.concat([g, h], axis=-1) @ params.w_ut + params.b_ut
    return T.cross_entropy(logits, targets, weights)


def total_loss(l_srl: Tensor, l_intra: Tensor, l_ut: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    for name, value in (("srl", l_srl), ("intra", l_intra), ("ut", l_ut)):
        if not np.isfinite(T.as_tensor(value).data).all():
            raise ValueError(f"{name} loss is not finite")
    return T.scale(l_srl, weights.srl) + T.scale(l_intra, weights.intra) + T.scale(l_ut, weights.ut)


def decode(
    p: Tensor,
    h: Tensor,
    token_utt: Sequence[int],
    params: HeadParams,
    labels: Sequence[str],
    utt_lengths: Sequence[int],
) -> TagSequence:
    """Per-token argmax over the SRL scores, then BIO repair."""
    logits = srl_logits(p, h, token_utt, params).data
    return tags_from_logits(logits, labels, utt_lengths)


def tags_from_logits(logits: np.ndarray, labels: Sequence[str], utt_lengths: Sequence[int]) -> TagSequence:
    best = logits.argmax(axis=-1)
    raw = [labels[i] for i in best]
    return TagSequence(tuple(repair_bio(raw, utt_lengths)), tuple(utt_lengths))


def spans_from_logits(logits: np.ndarray, labels: Sequence[str], utt_lengths: Sequence[int]) -> list[ArgumentSpan]:
    return bio_to_spans(tags_from_logits(logits, labels, utt_lengths))
