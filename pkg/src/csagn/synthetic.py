"""Seeded generator of templated two-speaker dialogues.

Every dialogue plants one main predicate inside a short segment of turns.
Depending on the segment pattern the predicate's object or agent is stated
in another turn:

* ``intra``: everything sits in the predicate turn.
* ``question``: the other speaker asked about the object just before.
* ``agent``: the other speaker asked what someone did just before.
* ``clarify``: the predicate speaker names the object in a later bare turn,
  while the other speaker may throw in a bare guess that is not an argument.
  Only the speakers tell the two bare turns apart.

Remaining turns are fillers that mention distractor objects; some of them
carry an extra intra-utterance ``like`` predicate.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .corpus import ArgumentSpan, Conversation, Corpus, Frame, Utterance, validate_instance

ROLES = ("ARG0", "ARG1", "ARGM-TMP")

# verb, question verb, object lexicon
CATEGORIES = {
    "movie": ("watched", "seen", ["titanic", "the matrix", "star wars", "inception", "the godfather", "up"]),
    "food": ("ate", "tried", ["pizza", "fried rice", "dumplings", "sushi", "noodle soup", "tacos"]),
    "book": ("read", "read", ["dune", "the hobbit", "war and peace", "emma", "the little prince"]),
    "place": ("visited", "been to", ["paris", "the museum", "new york", "the old castle", "rome"]),
    "item": ("bought", "got", ["a new phone", "shoes", "a red bike", "two tickets", "a lamp"]),
}
AGENTS = ["i", "we", "my sister", "my dad", "he", "she", "our neighbor"]
NAMES = ["tom", "lisa", "uncle bob", "anna", "the twins", "mr lee"]
TIMES = ["yesterday", "last week", "this morning", "on sunday", "twice"]
GREETINGS = [["hello"], ["hi", "there"], ["how", "are", "you", "?"], ["i", "am", "fine", "thanks"], ["good", "to", "hear"]]
REMARKS = [["{obj}", "is", "really", "good"], ["{obj}", "is", "a", "bit", "boring"], ["people", "talk", "about", "{obj}"]]
PATTERNS = ("intra", "question", "agent", "clarify")


@dataclass
class _Turn:
    tokens: list[str]
    spans: list[tuple[int, int, str]] = field(default_factory=list)
    pred: tuple[int, int] | None = None
    same_speaker: bool = True  # relative to the predicate turn


def _emit(parts: list, same_speaker: bool = True) -> _Turn:
    """Assemble a turn from plain strings and (role, phrase) pieces; the
    role "PRED" marks the predicate."""
    turn = _Turn([], same_speaker=same_speaker)
    for part in parts:
        if isinstance(part, str):
            turn.tokens += part.split()
            continue
        role, phrase = part
        words = phrase.split()
        span = (len(turn.tokens), len(turn.tokens) + len(words))
        if role == "PRED":
            turn.pred = span
        else:
            turn.spans.append((*span, role))
        turn.tokens += words
    return turn


def _filler(rng: random.Random) -> tuple[_Turn, _Turn | None]:
    """A filler turn; the second item is the same turn annotated with a
    'like' frame, or None."""
    choice = rng.random()
    if choice < 0.35:
        return _Turn(list(rng.choice(GREETINGS))), None
    obj = rng.choice(rng.choice(list(CATEGORIES.values()))[2])
    if choice < 0.75:
        words = []
        for w in rng.choice(REMARKS):
            words += obj.split() if w == "{obj}" else [w]
        return _Turn(words), None
    agent = rng.choice(AGENTS)
    plain = _emit([agent, "like", obj, "a lot"])
    framed = _emit([("ARG0", agent), ("PRED", "like"), ("ARG1", obj), "a lot"])
    return plain, framed


def _segment(rng: random.Random, pattern: str) -> tuple[list[_Turn], int]:
    """Turns of the main-predicate segment and the predicate turn's offset."""
    verb, qverb, lexicon = CATEGORIES[rng.choice(list(CATEGORIES))]
    obj, other_obj = rng.sample(lexicon, 2)
    agent = rng.choice(AGENTS)
    tmp = [("ARGM-TMP", rng.choice(TIMES))] if rng.random() < 0.4 else []
    if pattern == "intra":
        return [_emit([("ARG0", agent), ("PRED", verb), ("ARG1", obj), *tmp])], 0
    if pattern == "question":
        ask = _emit(["have you", qverb, ("ARG1", obj), "?"], same_speaker=False)
        return [ask, _emit(["yes ,", ("ARG0", agent), ("PRED", verb), *tmp])], 1
    if pattern == "agent":
        ask = _emit(["what did", ("ARG0", rng.choice(NAMES)), "do ?"], same_speaker=False)
        return [ask, _emit([("PRED", verb), ("ARG1", obj), *tmp])], 1
    if pattern == "clarify":
        pred = _emit(["guess what", ("ARG0", agent), ("PRED", verb), *tmp])
        answer = _emit([("ARG1", obj)])
        guess = _emit([other_obj], same_speaker=False)
        variant = rng.randrange(3)
        if variant == 0:
            return [pred, _emit(["tell me"], same_speaker=False), answer], 0
        if variant == 1:
            return [pred, guess, answer], 0
        return [pred, answer, guess], 0
    raise ValueError(f"unknown pattern {pattern!r}")


def generate(
    num_dialogs: int = 50,
    seed: int = 0,
    max_utts: int = 6,
    pattern_weights: tuple[float, float, float, float] = (0.3, 0.2, 0.15, 0.35),
) -> Corpus:
    """Build ``num_dialogs`` dialogues, each with one main predicate and
    possibly extra 'like' predicates in filler turns."""
    if max_utts < 3:
        raise ValueError("max_utts must be at least 3")
    rng = random.Random(seed)
    instances = []
    for d in range(num_dialogs):
        pattern = rng.choices(PATTERNS, weights=pattern_weights)[0]
        seg, pred_offset = _segment(rng, pattern)
        k = rng.randint(max(2, len(seg)), max_utts)
        start = rng.randint(0, k - len(seg))
        kp = start + pred_offset
        turns: list[_Turn] = []
        framed: dict[int, _Turn] = {}
        for i in range(k):
            if start <= i < start + len(seg):
                turns.append(seg[i - start])
                continue
            plain, like = _filler(rng)
            turns.append(plain)
            if like is not None:
                framed[i] = like
        # raw labels: "P" is the predicate speaker
        raw: list[str] = []
        for i, turn in enumerate(turns):
            if start <= i < start + len(seg):
                raw.append("P" if turn.same_speaker else "Q")
            elif not raw:
                raw.append(rng.choice("PQ"))
            else:
                keep = rng.random() < 0.15
                raw.append(raw[-1] if keep else {"P": "Q", "Q": "P"}[raw[-1]])
        ids: dict[str, int] = {}
        speakers = [ids.setdefault(s, len(ids)) for s in raw]
        utts = tuple(Utterance(i, s, tuple(t.tokens)) for i, (s, t) in enumerate(zip(speakers, turns)))
        conv = Conversation(f"synth-{seed}-{d}", utts, len(ids))
        args = [
            ArgumentSpan(start + j, s, e, role) for j, turn in enumerate(seg) for s, e, role in turn.spans
        ]
        frames = [Frame(kp, seg[pred_offset].pred, tuple(sorted(args)))]
        for i, like in framed.items():
            frames.append(Frame(i, like.pred, tuple(ArgumentSpan(i, s, e, r) for s, e, r in like.spans)))
        for frame in frames:
            validate_instance(conv, frame, ROLES)
            instances.append((conv, frame))
    return Corpus(instances, ROLES)
