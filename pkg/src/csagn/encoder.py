"""Token encoder: trainable embeddings, predicate-aware masked self-attention
and max-pooled utterance vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .corpus import Conversation, Frame
from .tensor import Tensor

UNK, PAD = 0, 1
UNK_TOKEN, PAD_TOKEN = "<unk>", "<pad>"


class Vocab:
    """Token-to-id map; id 0 is UNK and id 1 is PAD."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = [UNK_TOKEN, PAD_TOKEN]
        self.stoi = {UNK_TOKEN: UNK, PAD_TOKEN: PAD}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self[t] for t in tokens]

    @classmethod
    def from_conversations(cls, convs: Iterable[Conversation]) -> "Vocab":
        return cls(tok for conv in convs for tok in conv.flat_tokens())

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:2] != [UNK_TOKEN, PAD_TOKEN]:
            raise ValueError(f"{path}: first two vocabulary lines must be {UNK_TOKEN} and {PAD_TOKEN}")
        return cls(lines[2:])


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor


@dataclass
class EncoderParams:
    token_emb: Tensor
    position_emb: Tensor
    predicate_emb: Tensor
    blocks: list[BlockParams]
    ln_out_gain: Tensor
    ln_out_bias: Tensor
    proj_w: Tensor
    proj_b: Tensor
    num_heads: int = 4

    @property
    def d_enc(self) -> int:
        return self.token_emb.shape[1]

    @property
    def max_len(self) -> int:
        return self.position_emb.shape[0]


def _param(a: np.ndarray) -> Tensor:
    return Tensor(a, requires_grad=True)


def init_encoder(
    rng: np.random.Generator,
    vocab_size: int,
    d_enc: int = 64,
    d_graph: int = 100,
    num_blocks: int = 4,
    num_heads: int = 4,
    max_len: int = 512,
    d_ff: int | None = None,
) -> EncoderParams:
    if d_enc % num_heads:
        raise ValueError(f"d_enc={d_enc} not divisible by num_heads={num_heads}")
    d_ff = d_ff or 2 * d_enc

    def dense(n_in, n_out):
        return _param(rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)))

    blocks = [
        BlockParams(
            ln1_gain=_param(np.ones(d_enc)),
            ln1_bias=_param(np.zeros(d_enc)),
            w_q=dense(d_enc, d_enc),
            w_k=dense(d_enc, d_enc),
            w_v=dense(d_enc, d_enc),
            w_o=dense(d_enc, d_enc),
            b_o=_param(np.zeros(d_enc)),
            ln2_gain=_param(np.ones(d_enc)),
            ln2_bias=_param(np.zeros(d_enc)),
            w_ff1=dense(d_enc, d_ff),
            b_ff1=_param(np.zeros(d_ff)),
            w_ff2=dense(d_ff, d_enc),
            b_ff2=_param(np.zeros(d_enc)),
        )
        for _ in range(num_blocks)
    ]
    return EncoderParams(
        token_emb=_param(rng.normal(0.0, 0.5, (vocab_size, d_enc))),
        position_emb=_param(rng.normal(0.0, 0.1, (max_len, d_enc))),
        predicate_emb=_param(rng.normal(0.0, 0.5, (2, d_enc))),
        blocks=blocks,
        ln_out_gain=_param(np.ones(d_enc)),
        ln_out_bias=_param(np.zeros(d_enc)),
        proj_w=dense(d_enc, d_graph),
        proj_b=_param(np.zeros(d_graph)),
        num_heads=num_heads,
    )


# ---------------------------------------------------------------------------
# masks


def build_predicate_mask(conv: Conversation, predicate_utt: int) -> np.ndarray:
    """Token i may attend to j iff they share an utterance or j is in the
    predicate's utterance."""
    if not 0 <= predicate_utt < len(conv):
        raise ValueError(f"predicate_utt={predicate_utt} outside [0, {len(conv)})")
    utt = np.asarray(conv.token_utterance())
    return (utt[:, None] == utt[None, :]) | (utt[None, :] == predicate_utt)


def build_full_mask(conv: Conversation) -> np.ndarray:
    n = conv.num_tokens
    return np.ones((n, n), dtype=bool)


# ---------------------------------------------------------------------------
# forward pieces


def embed(token_ids, positions, predicate_flags, params: EncoderParams) -> Tensor:
    """Sum of token, position and predicate-indicator embeddings.

    Index arrays share one shape ``S``; the result has shape ``S + (d_enc,)``.
    """
    token_ids = np.asarray(token_ids)
    positions = np.asarray(positions)
    if positions.size and positions.max() >= params.max_len:
        raise ValueError(f"sequence of length {positions.max() + 1} exceeds max_len={params.max_len}")
    shape = token_ids.shape + (params.d_enc,)
    tok = T.take_rows(params.token_emb, token_ids.reshape(-1))
    pos = T.take_rows(params.position_emb, positions.reshape(-1))
    pred = T.take_rows(params.predicate_emb, np.asarray(predicate_flags, dtype=np.int64).reshape(-1))
    return T.reshape(tok + pos + pred, shape)


def embed_tokens(conv: Conversation, frame: Frame, params: EncoderParams, vocab: Vocab) -> Tensor:
    n = conv.num_tokens
    if n > params.max_len:
        raise ValueError(f"conversation {conv.id!r} has {n} tokens, max_len={params.max_len}")
    return embed(vocab.encode(conv.flat_tokens()), np.arange(n), predicate_indicator(conv, frame), params)


def predicate_indicator(conv: Conversation, frame: Frame) -> np.ndarray:
    flags = np.zeros(conv.num_tokens, dtype=np.int64)
    base = conv.offsets()[frame.predicate_utt]
    flags[base + frame.predicate_span[0] : base + frame.predicate_span[1]] = 1
    return flags


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, num_heads, d // num_heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = T.transpose(x, axes)
    *lead, n, h, dh = x.shape
    return T.reshape(x, (*lead, n, h * dh))


def multi_head_attention(x: Tensor, mask: np.ndarray, blk: BlockParams, num_heads: int) -> tuple[Tensor, Tensor]:
    """Masked scaled dot-product attention; returns (output, weights).

    ``x`` is ``(..., n, d)`` and ``mask`` is ``(..., n, n)``; weights are
    ``(..., heads, n, n)``.
    """
    d = x.shape[-1]
    q = _split_heads(x @ blk.w_q, num_heads)
    k = _split_heads(x @ blk.w_k, num_heads)
    v = _split_heads(x @ blk.w_v, num_heads)
    scores = T.scale(q @ T.swap_last(k), 1.0 / math.sqrt(d // num_heads))
    head_mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)
    weights = T.softmax(scores, axis=-1, mask=head_mask)
    out = _merge_heads(weights @ v) @ blk.w_o + blk.b_o
    return out, weights


def attention_block(x: Tensor, mask: np.ndarray, blk: BlockParams, num_heads: int = 4, return_weights: bool = False):
    """Pre-norm transformer block: x + MHA(LN(x)), then + FFN(LN(.))."""
    attn, weights = multi_head_attention(T.layer_norm(x, blk.ln1_gain, blk.ln1_bias), mask, blk, num_heads)
    x = x + attn
    hidden = T.relu(T.layer_norm(x, blk.ln2_gain, blk.ln2_bias) @ blk.w_ff1 + blk.b_ff1)
    x = x + (hidden @ blk.w_ff2 + blk.b_ff2)
    return (x, weights) if return_weights else x


def contextualize(e: Tensor, mask: np.ndarray, params: EncoderParams) -> Tensor:
    """Run every attention block over ``e`` with the same mask."""
    x = e
    for blk in params.blocks:
        x = attention_block(x, mask, blk, params.num_heads)
    return T.layer_norm(x, params.ln_out_gain, params.ln_out_bias)


def pool_utterances(p_rows: Tensor, segment_ids: Sequence[int], num_segments: int, params: EncoderParams) -> Tensor:
    """Max-pool token rows per utterance and project to the graph width."""
    pooled = T.max_pool_segments(p_rows, segment_ids, num_segments)
    return pooled @ params.proj_w + params.proj_b


def encode(
    conv: Conversation,
    frame: Frame,
    params: EncoderParams,
    vocab: Vocab,
    full_attention: bool = False,
    predicate_aware: bool = True,
) -> tuple[Tensor, Tensor, Tensor]:
    """Single-instance encoder pass returning ``(e, p, u)``.

    ``e`` and ``p`` are ``n x d_enc``, ``u`` is ``K x d_graph``. With
    ``predicate_aware=False`` the attention stack is skipped and ``p = e``.
    """
    e = embed_tokens(conv, frame, params, vocab)
    if predicate_aware:
        mask = build_full_mask(conv) if full_attention else build_predicate_mask(conv, frame.predicate_utt)
        p = contextualize(e, mask, params)
    else:
        p = e
    u = pool_utterances(p, conv.token_utterance(), len(conv), params)
    return e, p, u
