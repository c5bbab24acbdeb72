"""Conversational SRL corpus: data model, JSON-lines loading, tag derivation,
statistics and dialogue-level splits."""

from __future__ import annotations

import json
import random
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

OUTSIDE = "O"
PREDICATE_UTT = "predicate-utterance"
ARGUMENT_UTT = "argument-utterance"
IRRELEVANT_UTT = "irrelevant-utterance"
UTTERANCE_TYPES = (PREDICATE_UTT, ARGUMENT_UTT, IRRELEVANT_UTT)


class CorpusError(ValueError):
    """Malformed corpus line or an annotation that violates an invariant."""


@dataclass(frozen=True)
class Utterance:
    index: int
    speaker: int
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple[Utterance, ...]
    num_speakers: int

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def speakers(self) -> tuple[int, ...]:
        return tuple(u.speaker for u in self.utterances)

    @property
    def utt_lengths(self) -> tuple[int, ...]:
        return tuple(len(u.tokens) for u in self.utterances)

    @property
    def num_tokens(self) -> int:
        return sum(self.utt_lengths)

    def offsets(self) -> list[int]:
        """Flat index of the first token of each utterance."""
        out, total = [], 0
        for n in self.utt_lengths:
            out.append(total)
            total += n
        return out

    def flat_tokens(self) -> list[str]:
        return [tok for u in self.utterances for tok in u.tokens]

    def token_utterance(self) -> list[int]:
        return [u.index for u in self.utterances for _ in u.tokens]


@dataclass(frozen=True, order=True)
class ArgumentSpan:
    utt_index: int
    start: int
    end: int
    role: str


@dataclass(frozen=True)
class Frame:
    predicate_utt: int
    predicate_span: tuple[int, int]
    arguments: tuple[ArgumentSpan, ...] = ()


@dataclass(frozen=True)
class TagSequence:
    """BIO labels over the concatenated utterances of one conversation."""

    labels: tuple[str, ...]
    utt_lengths: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.labels)

    def to_spans(self) -> list[ArgumentSpan]:
        return bio_to_spans(self)


@dataclass(frozen=True)
class CorpusStats:
    num_dialogs: int
    num_utterances: int
    num_predicates: int
    num_arguments: int
    cross_ratio: float

    def to_dict(self) -> dict:
        return {
            "num_dialogs": self.num_dialogs,
            "num_utterances": self.num_utterances,
            "num_predicates": self.num_predicates,
            "num_arguments": self.num_arguments,
            "cross_ratio": self.cross_ratio,
        }


@dataclass
class Corpus:
    """Instances plus the closed role inventory they were validated against."""

    instances: list[tuple[Conversation, Frame]]
    roles: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]


# ---------------------------------------------------------------------------
# BIO label inventory


def label_inventory(roles: Iterable[str]) -> tuple[str, ...]:
    labels = [OUTSIDE]
    for role in roles:
        labels += [f"B-{role}", f"I-{role}"]
    return tuple(labels)


def _split_label(label: str) -> tuple[str, str | None]:
    if label == OUTSIDE:
        return OUTSIDE, None
    prefix, sep, role = label.partition("-")
    if not sep or prefix not in ("B", "I") or not role:
        raise ValueError(f"not a BIO label: {label!r}")
    return prefix, role


def repair_bio(labels: Sequence[str], utt_lengths: Sequence[int]) -> list[str]:
    """Turn every I-X that does not continue an X span into B-X.

    Spans never cross an utterance boundary, so an I-X opening an utterance
    is also repaired.
    """
    fixed = list(labels)
    starts = set()
    pos = 0
    for n in utt_lengths:
        starts.add(pos)
        pos += n
    prev_role = None
    for t, label in enumerate(fixed):
        prefix, role = _split_label(label)
        if t in starts:
            prev_role = None
        if prefix == "I" and role != prev_role:
            fixed[t] = f"B-{role}"
        prev_role = role
    return fixed


def bio_to_spans(tags: TagSequence) -> list[ArgumentSpan]:
    labels = repair_bio(tags.labels, tags.utt_lengths)
    if len(labels) != sum(tags.utt_lengths):
        raise ValueError(f"{len(labels)} labels for {sum(tags.utt_lengths)} tokens")
    spans: list[ArgumentSpan] = []
    pos = 0
    for k, n in enumerate(tags.utt_lengths):
        start = role = None
        for i in range(n):
            prefix, r = _split_label(labels[pos + i])
            if prefix != "I" and role is not None:
                spans.append(ArgumentSpan(k, start, i, role))
                start = role = None
            if prefix == "B":
                start, role = i, r
        if role is not None:
            spans.append(ArgumentSpan(k, start, n, role))
        pos += n
    return spans


# ---------------------------------------------------------------------------
# validation and loading


def validate_instance(conv: Conversation, frame: Frame, roles: Iterable[str] | None = None) -> None:
    where = f"instance {conv.id!r}"
    if not conv.utterances:
        raise CorpusError(f"{where}: utterances must be nonempty")
    if conv.num_speakers < 1:
        raise CorpusError(f"{where}: num_speakers must be >= 1")
    for k, utt in enumerate(conv.utterances):
        if utt.index != k:
            raise CorpusError(f"{where}: utterance index {utt.index} at position {k}")
        if not utt.tokens:
            raise CorpusError(f"{where}: utterances[{k}].tokens is empty")
        if not 0 <= utt.speaker < conv.num_speakers:
            raise CorpusError(f"{where}: speakers[{k}]={utt.speaker} outside [0, {conv.num_speakers})")
    lengths = conv.utt_lengths
    if not 0 <= frame.predicate_utt < len(lengths):
        raise CorpusError(f"{where}: predicate.utt={frame.predicate_utt} outside [0, {len(lengths)})")
    ps, pe = frame.predicate_span
    if not 0 <= ps < pe <= lengths[frame.predicate_utt]:
        raise CorpusError(f"{where}: predicate span [{ps}, {pe}) invalid for utterance {frame.predicate_utt}")
    allowed = None if roles is None else set(roles)
    occupied: dict[int, list[tuple[int, int]]] = {frame.predicate_utt: [(ps, pe)]}
    for a, arg in enumerate(frame.arguments):
        if not 0 <= arg.utt_index < len(lengths):
            raise CorpusError(f"{where}: arguments[{a}].utt={arg.utt_index} outside [0, {len(lengths)})")
        if not 0 <= arg.start < arg.end <= lengths[arg.utt_index]:
            raise CorpusError(
                f"{where}: arguments[{a}].end={arg.end} / start={arg.start} invalid for "
                f"utterance of length {lengths[arg.utt_index]}"
            )
        if allowed is not None and arg.role not in allowed:
            raise CorpusError(f"{where}: arguments[{a}].role={arg.role!r} not in the declared inventory")
        if not arg.role:
            raise CorpusError(f"{where}: arguments[{a}].role is empty")
        for s, e in occupied.setdefault(arg.utt_index, []):
            if arg.start < e and s < arg.end:
                raise CorpusError(f"{where}: arguments[{a}] overlaps another span in utterance {arg.utt_index}")
        occupied[arg.utt_index].append((arg.start, arg.end))


def _normalize_speakers(raw: Sequence) -> tuple[list[int], int]:
    """Map speaker labels to ids in order of first appearance."""
    mapping: dict = {}
    ids = []
    for s in raw:
        if isinstance(s, bool) or not isinstance(s, (int, str)):
            raise TypeError(f"speaker ids must be int or str, got {s!r}")
        ids.append(mapping.setdefault(s, len(mapping)))
    return ids, max(len(mapping), 1)


def parse_record(record: dict, roles: Iterable[str] | None = None) -> tuple[Conversation, Frame]:
    """Build and validate one instance from its decoded JSON object."""
    try:
        cid = str(record["id"])
        utts = record["utterances"]
        speakers, num_speakers = _normalize_speakers(record["speakers"])
        if len(speakers) != len(utts):
            raise CorpusError(f"instance {cid!r}: {len(speakers)} speakers for {len(utts)} utterances")
        conv = Conversation(
            id=cid,
            utterances=tuple(
                Utterance(k, spk, tuple(str(t) for t in toks)) for k, (spk, toks) in enumerate(zip(speakers, utts))
            ),
            num_speakers=num_speakers,
        )
        pred = record["predicate"]
        frame = Frame(
            predicate_utt=int(pred["utt"]),
            predicate_span=(int(pred["start"]), int(pred["end"])),
            arguments=tuple(
                ArgumentSpan(int(a["utt"]), int(a["start"]), int(a["end"]), str(a["role"]))
                for a in record.get("arguments", [])
            ),
        )
    except CorpusError:
        raise
    except KeyError as exc:
        raise CorpusError(f"instance {record.get('id')!r}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise CorpusError(f"instance {record.get('id')!r}: {exc}") from None
    validate_instance(conv, frame, roles)
    return conv, frame


def load_corpus(path: str | Path) -> Corpus:
    """Read a JSON-lines corpus, one (conversation, predicate) instance per line.

    An optional first line ``{"roles": [...]}`` declares the closed role
    inventory; without it the inventory is the set of roles seen, in order
    of first appearance.
    """
    path = Path(path)
    instances: list[tuple[Conversation, Frame]] = []
    roles: list[str] | None = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            if "roles" in record and "id" not in record:
                if instances or roles is not None:
                    raise CorpusError(f"{path}:{lineno}: role header must be the first line")
                roles = [str(r) for r in record["roles"]]
                continue
            try:
                instances.append(parse_record(record, roles))
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
    if roles is None:
        roles = list(dict.fromkeys(a.role for _, f in instances for a in f.arguments))
    return Corpus(instances, tuple(roles))


def instance_to_record(conv: Conversation, frame: Frame, arguments: Iterable[ArgumentSpan] | None = None) -> dict:
    args = frame.arguments if arguments is None else arguments
    return {
        "id": conv.id,
        "speakers": list(conv.speakers),
        "utterances": [list(u.tokens) for u in conv.utterances],
        "predicate": {"utt": frame.predicate_utt, "start": frame.predicate_span[0], "end": frame.predicate_span[1]},
        "arguments": [{"utt": a.utt_index, "start": a.start, "end": a.end, "role": a.role} for a in args],
    }


def write_corpus(path: str | Path, corpus: Corpus) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"roles": list(corpus.roles)}) + "\n")
        for conv, frame in corpus:
            fh.write(json.dumps(instance_to_record(conv, frame), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# training targets


def derive_tags(conv: Conversation, frame: Frame) -> TagSequence:
    labels = [OUTSIDE] * conv.num_tokens
    offsets = conv.offsets()
    for arg in frame.arguments:
        base = offsets[arg.utt_index]
        labels[base + arg.start] = f"B-{arg.role}"
        for i in range(arg.start + 1, arg.end):
            labels[base + i] = f"I-{arg.role}"
    return TagSequence(tuple(labels), conv.utt_lengths)


def derive_utterance_types(conv: Conversation, frame: Frame) -> list[str]:
    with_args = {a.utt_index for a in frame.arguments}
    types = []
    for k in range(len(conv)):
        if k == frame.predicate_utt:
            types.append(PREDICATE_UTT)
        elif k in with_args:
            types.append(ARGUMENT_UTT)
        else:
            types.append(IRRELEVANT_UTT)
    return types


def intra_token_mask(conv: Conversation, frame: Frame) -> list[bool]:
    """True at tokens of argument spans that share the predicate's utterance."""
    mask = [False] * conv.num_tokens
    offsets = conv.offsets()
    for arg in frame.arguments:
        if arg.utt_index == frame.predicate_utt:
            base = offsets[arg.utt_index]
            for i in range(arg.start, arg.end):
                mask[base + i] = True
    return mask


# ---------------------------------------------------------------------------
# statistics and splits


def stats(dataset: Iterable[tuple[Conversation, Frame]]) -> CorpusStats:
    dialogs: dict[str, int] = {}
    n_pred = n_args = n_cross = 0
    for conv, frame in dataset:
        dialogs.setdefault(conv.id, len(conv))
        n_pred += 1
        n_args += len(frame.arguments)
        n_cross += sum(a.utt_index != frame.predicate_utt for a in frame.arguments)
    if not n_pred:
        raise CorpusError("stats: empty dataset")
    return CorpusStats(
        num_dialogs=len(dialogs),
        num_utterances=sum(dialogs.values()),
        num_predicates=n_pred,
        num_arguments=n_args,
        cross_ratio=n_cross / n_args if n_args else 0.0,
    )


def split(
    dataset: Sequence[tuple[Conversation, Frame]],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list, list, list]:
    """Shuffle dialogues with ``seed`` and cut them into train/dev/test.

    All predicates of one dialogue land in the same part; the ratios apply
    to dialogue counts.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    groups: dict[str, list] = {}
    for inst in dataset:
        groups.setdefault(inst[0].id, []).append(inst)
    ids = list(groups)
    random.Random(seed).shuffle(ids)
    n = len(ids)
    n_train = round(ratios[0] * n)
    n_dev = min(round(ratios[1] * n), n - n_train)
    parts = (ids[:n_train], ids[n_train : n_train + n_dev], ids[n_train + n_dev :])
    return tuple([inst for cid in part for inst in groups[cid]] for part in parts)  # type: ignore[return-value]
