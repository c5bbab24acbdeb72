"""Full CSAGN network: batching of instances, forward pass with ablation
switches, and span prediction."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import (
    UTTERANCE_TYPES,
    ArgumentSpan,
    Conversation,
    Frame,
    derive_tags,
    derive_utterance_types,
    intra_token_mask,
    label_inventory,
)
from .encoder import PAD, EncoderParams, Vocab, build_full_mask, build_predicate_mask, contextualize, embed, init_encoder
from .encoder import pool_utterances, predicate_indicator
from .graph import ConvGraph, GraphArrays, GraphParams, ablate, build_graph, init_graph, propagate
from .objectives import (
    HeadParams,
    LossWeights,
    encode_labels,
    init_heads,
    intra_loss,
    spans_from_logits,
    srl_logits,
    total_loss,
    utterance_type_loss,
)
from .tensor import Tensor

SWITCHES = (
    "full_attention",
    "no_sagn",
    "no_predicate_rep",
    "no_speaker_dep",
    "no_predicate_dep",
    "srl_only",
    "no_intra_obj",
    "no_ut_obj",
)


@dataclass(frozen=True)
class Switches:
    full_attention: bool = False
    no_sagn: bool = False
    no_predicate_rep: bool = False
    no_speaker_dep: bool = False
    no_predicate_dep: bool = False
    srl_only: bool = False
    no_intra_obj: bool = False
    no_ut_obj: bool = False

    @classmethod
    def only(cls, name: str | None) -> "Switches":
        if name in (None, "", "none", "baseline"):
            return cls()
        if name not in SWITCHES:
            raise ValueError(f"unknown ablation switch {name!r}; expected one of {SWITCHES}")
        return cls(**{name: True})

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]

    def loss_weights(self, base: LossWeights) -> LossWeights:
        if self.srl_only:
            return LossWeights(base.srl, 0.0, 0.0)
        return LossWeights(base.srl, 0.0 if self.no_intra_obj else base.intra, 0.0 if self.no_ut_obj else base.ut)

    def graph_ablations(self) -> list[str]:
        return [m for m in ("no_speaker_dep", "no_predicate_dep") if getattr(self, m)]


@dataclass(frozen=True)
class ModelConfig:
    d_enc: int = 64
    d_graph: int = 100
    num_blocks: int = 4
    num_heads: int = 4
    max_len: int = 512
    window: int | None = 4
    num_speakers: int = 2
    learnable_norm: bool = False
    reduction: str = "sum"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Params:
    encoder: EncoderParams
    graph: GraphParams
    heads: HeadParams

    def named(self) -> dict[str, Tensor]:
        return T.named_tensors(self)


@dataclass
class Features:
    """Per-instance arrays that do not change across epochs."""

    conv: Conversation
    frame: Frame
    token_ids: np.ndarray
    pred_flags: np.ndarray
    token_utt: np.ndarray
    labels: np.ndarray
    intra: np.ndarray
    utt_types: np.ndarray
    mask: np.ndarray
    graph: ConvGraph


@dataclass
class Batch:
    size: int
    max_tokens: int
    max_utts: int
    token_ids: np.ndarray
    positions: np.ndarray
    pred_flags: np.ndarray
    token_valid: np.ndarray
    attn_mask: np.ndarray
    segment_ids: np.ndarray
    token_rows_utt: np.ndarray
    labels: np.ndarray
    intra: np.ndarray
    utt_types: np.ndarray
    utt_valid: np.ndarray
    graph: GraphArrays
    features: list[Features] = field(repr=False)


@dataclass
class Output:
    e: Tensor
    p: Tensor
    g: Tensor
    h: Tensor
    alpha: Tensor | None
    logits: Tensor
    l_srl: Tensor
    l_intra: Tensor
    l_ut: Tensor
    loss: Tensor


class CSAGN:
    """Parameters plus the vocabulary and label inventory they are tied to."""

    def __init__(self, vocab: Vocab, roles: Sequence[str], config: ModelConfig = ModelConfig(), seed: int = 0):
        self.vocab = vocab
        self.roles = tuple(roles)
        self.labels = label_inventory(self.roles)
        self.config = config
        rng = np.random.default_rng(seed)
        self.params = Params(
            encoder=init_encoder(
                rng,
                len(vocab),
                d_enc=config.d_enc,
                d_graph=config.d_graph,
                num_blocks=config.num_blocks,
                num_heads=config.num_heads,
                max_len=config.max_len,
            ),
            graph=init_graph(rng, config.d_graph, config.num_speakers, config.learnable_norm),
            heads=init_heads(rng, len(self.labels), config.d_enc, config.d_graph),
        )

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params.named()

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, t in named.items():
            if state[name].shape != t.shape:
                raise ValueError(f"parameter {name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=T.DTYPE)

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()

    # -- preprocessing -----------------------------------------------------

    def features(self, conv: Conversation, frame: Frame, switches: Switches = Switches()) -> Features:
        if conv.num_speakers > self.config.num_speakers:
            raise ValueError(
                f"conversation {conv.id!r} has {conv.num_speakers} speakers; model built for {self.config.num_speakers}"
            )
        if conv.num_tokens > self.config.max_len:
            raise ValueError(f"conversation {conv.id!r} has {conv.num_tokens} tokens, max_len={self.config.max_len}")
        mask = build_full_mask(conv) if switches.full_attention else build_predicate_mask(conv, frame.predicate_utt)
        graph = build_graph(conv, frame.predicate_utt, self.config.window)
        modes = switches.graph_ablations()
        if modes:
            graph = ablate(graph, modes)
        return Features(
            conv=conv,
            frame=frame,
            token_ids=np.asarray(self.vocab.encode(conv.flat_tokens()), dtype=np.int64),
            pred_flags=predicate_indicator(conv, frame),
            token_utt=np.asarray(conv.token_utterance(), dtype=np.int64),
            labels=encode_labels(derive_tags(conv, frame), self.labels),
            intra=np.asarray(intra_token_mask(conv, frame), dtype=float),
            utt_types=np.asarray([UTTERANCE_TYPES.index(t) for t in derive_utterance_types(conv, frame)]),
            mask=mask,
            graph=graph,
        )

    def batch(self, feats: Sequence[Features]) -> Batch:
        b = len(feats)
        n_max = max(len(f.token_ids) for f in feats)
        k_max = max(len(f.conv) for f in feats)
        token_ids = np.full((b, n_max), PAD, dtype=np.int64)
        positions = np.zeros((b, n_max), dtype=np.int64)
        pred_flags = np.zeros((b, n_max), dtype=np.int64)
        valid = np.zeros((b, n_max), dtype=bool)
        mask = np.zeros((b, n_max, n_max), dtype=bool)
        mask[:, np.arange(n_max), np.arange(n_max)] = True
        seg = np.full((b, n_max), -1, dtype=np.int64)
        rows_utt = np.zeros((b, n_max), dtype=np.int64)
        labels = np.zeros((b, n_max), dtype=np.int64)
        intra = np.zeros((b, n_max))
        utt_types = np.zeros((b, k_max), dtype=np.int64)
        utt_valid = np.zeros((b, k_max))
        for i, f in enumerate(feats):
            n, k = len(f.token_ids), len(f.conv)
            token_ids[i, :n] = f.token_ids
            positions[i, :n] = np.arange(n)
            pred_flags[i, :n] = f.pred_flags
            valid[i, :n] = True
            mask[i, :n, :n] = f.mask
            seg[i, :n] = i * k_max + f.token_utt
            rows_utt[i, :n] = i * k_max + f.token_utt
            labels[i, :n] = f.labels
            intra[i, :n] = f.intra
            utt_types[i, :k] = f.utt_types
            utt_valid[i, :k] = 1.0
        graph = GraphArrays.from_graphs([f.graph for f in feats], self.config.num_speakers, k_max)
        return Batch(
            size=b,
            max_tokens=n_max,
            max_utts=k_max,
            token_ids=token_ids,
            positions=positions,
            pred_flags=pred_flags,
            token_valid=valid,
            attn_mask=mask,
            segment_ids=seg.reshape(-1),
            token_rows_utt=rows_utt.reshape(-1),
            labels=labels.reshape(-1),
            intra=intra.reshape(-1),
            utt_types=utt_types.reshape(-1),
            utt_valid=utt_valid.reshape(-1),
            graph=graph,
            features=list(feats),
        )

    # -- forward -------------------------------------------------------------

    def forward(
        self, batch: Batch, switches: Switches = Switches(), loss_weights: LossWeights = LossWeights()
    ) -> Output:
        cfg, prm = self.config, self.params
        b, n, k = batch.size, batch.max_tokens, batch.max_utts
        e = embed(batch.token_ids, batch.positions, batch.pred_flags, prm.encoder)
        p = e if switches.no_predicate_rep else contextualize(e, batch.attn_mask, prm.encoder)
        e_rows = T.reshape(e, (b * n, cfg.d_enc))
        p_rows = T.reshape(p, (b * n, cfg.d_enc))
        g_rows = pool_utterances(p_rows, batch.segment_ids, b * k, prm.encoder)
        if switches.no_sagn:
            h_rows, alpha = g_rows, None
        else:
            h, alpha = propagate(T.reshape(g_rows, (b, k, cfg.d_graph)), batch.graph, prm.graph)
            h_rows = T.reshape(h, (b * k, cfg.d_graph))
        logits = srl_logits(p_rows, h_rows, batch.token_rows_utt, prm.heads)
        weights = batch.token_valid.reshape(-1).astype(float)
        l_srl = T.cross_entropy(logits, batch.labels, weights)
        if cfg.reduction == "mean":
            l_srl = T.scale(l_srl, 1.0 / max(weights.sum(), 1.0))
        l_intra = intra_loss(e_rows, p_rows, batch.labels, batch.intra, prm.heads, reduction=cfg.reduction)
        l_ut = utterance_type_loss(g_rows, h_rows, batch.utt_types, prm.heads, weights=batch.utt_valid)
        loss = total_loss(l_srl, l_intra, l_ut, switches.loss_weights(loss_weights))
        return Output(e, p, g_rows, h_rows, alpha, logits, l_srl, l_intra, l_ut, loss)

    def predict_batch(self, batch: Batch, switches: Switches = Switches()) -> list[list[ArgumentSpan]]:
        out = self.forward(batch, switches)
        logits = out.logits.data.reshape(batch.size, batch.max_tokens, -1)
        preds = []
        for i, f in enumerate(batch.features):
            n = len(f.token_ids)
            preds.append(spans_from_logits(logits[i, :n], self.labels, f.conv.utt_lengths))
        return preds

    def predict(
        self, instances: Sequence[tuple[Conversation, Frame]], switches: Switches = Switches(), batch_size: int = 128
    ) -> list[list[ArgumentSpan]]:
        feats = [self.features(c, f, switches) for c, f in instances]
        preds: list[list[ArgumentSpan]] = []
        for start in range(0, len(feats), batch_size):
            preds.extend(self.predict_batch(self.batch(feats[start : start + batch_size]), switches))
        return preds

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"config": self.config.to_dict(), "vocab": self.vocab.itos[2:], "roles": list(self.roles)}
        meta.update(extra or {})
        T.save_checkpoint(path, self.named_parameters(), meta)

    @classmethod
    def load(cls, path) -> "CSAGN":
        arrays, meta = T.load_checkpoint(path)
        model = cls(Vocab(meta["vocab"]), meta["roles"], ModelConfig(**meta["config"]))
        model.load_state(arrays)
        return model
