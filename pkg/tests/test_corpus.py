import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csagn import corpus
from csagn.corpus import (
    ArgumentSpan,
    Conversation,
    CorpusError,
    Frame,
    TagSequence,
    Utterance,
    derive_tags,
    derive_utterance_types,
    instance_to_record,
    load_corpus,
    repair_bio,
)
from strategies import ROLES, instances


def record(**over):
    base = {
        "id": "d1",
        "speakers": [0],
        "utterances": [["hello", "world"]],
        "predicate": {"utt": 0, "start": 0, "end": 1},
        "arguments": [],
    }
    base.update(over)
    return base


def conv_of(*utts, speakers=None):
    speakers = speakers or [0] * len(utts)
    return Conversation(
        "c", tuple(Utterance(i, s, tuple(u.split())) for i, (s, u) in enumerate(zip(speakers, utts))), max(speakers) + 1
    )


# -- loading -------------------------------------------------------------------


def test_minimal_record_loads(write_lines):
    data = load_corpus(write_lines([record(utterances=[["hi"]])]))
    assert len(data) == 1
    conv, frame = data[0]
    assert len(conv) == 1
    assert frame.predicate_span == (0, 1)
    assert frame.arguments == ()


def test_argument_past_utterance_end_is_rejected(write_lines):
    bad = record(arguments=[{"utt": 0, "start": 1, "end": 3, "role": "ARG1"}])
    with pytest.raises(CorpusError, match="arguments\\[0\\]") as err:
        load_corpus(write_lines([bad]))
    assert "d1" in str(err.value)
    assert ":1:" in str(err.value)


def test_parse_failure_names_line_number(write_lines, tmp_path):
    path = tmp_path / "broken.jsonl"
    path.write_text(json.dumps(record()) + "\n{not json\n")
    with pytest.raises(CorpusError, match=":2:"):
        load_corpus(path)


def test_missing_field_is_named(write_lines):
    rec = record()
    del rec["predicate"]
    with pytest.raises(CorpusError, match="predicate"):
        load_corpus(write_lines([rec]))


def test_role_header_closes_inventory(write_lines):
    rec = record(arguments=[{"utt": 0, "start": 1, "end": 2, "role": "ARG9"}])
    with pytest.raises(CorpusError, match="inventory"):
        load_corpus(write_lines([{"roles": ["ARG0", "ARG1"]}, rec]))
    ok = record(arguments=[{"utt": 0, "start": 1, "end": 2, "role": "ARG1"}])
    assert load_corpus(write_lines([{"roles": ["ARG0", "ARG1"]}, ok])).roles == ("ARG0", "ARG1")


def test_overlap_with_predicate_is_rejected(write_lines):
    rec = record(arguments=[{"utt": 0, "start": 0, "end": 2, "role": "ARG1"}])
    with pytest.raises(CorpusError, match="overlap"):
        load_corpus(write_lines([rec]))


def test_speakers_normalised_by_first_appearance(write_lines):
    rec = record(speakers=["bob", "amy", "bob"], utterances=[["a"], ["b"], ["c"]])
    conv, _ = load_corpus(write_lines([rec]))[0]
    assert conv.speakers == (0, 1, 0)
    assert conv.num_speakers == 2


def test_file_round_trip(tmp_path, synth_small):
    path = tmp_path / "c.jsonl"
    corpus.write_corpus(path, synth_small)
    again = load_corpus(path)
    assert again.roles == synth_small.roles
    assert again.instances == synth_small.instances


@settings(max_examples=80, deadline=None)
@given(instances())
def test_record_round_trip(inst):
    conv, frame = inst
    assert corpus.parse_record(json.loads(json.dumps(instance_to_record(conv, frame))), ROLES) == (conv, frame)


# -- tags ------------------------------------------------------------------------


def test_zero_arguments_give_all_outside():
    conv = conv_of("a b c", "d e")
    assert set(derive_tags(conv, Frame(0, (0, 1))).labels) == {"O"}


def test_single_argument_tags():
    conv = conv_of("w0 w1 w2 w3 w4")
    tags = derive_tags(conv, Frame(0, (0, 1), (ArgumentSpan(0, 2, 4, "ARG1"),)))
    assert tags.labels[2:4] == ("B-ARG1", "I-ARG1")
    assert tags.labels.count("O") == 3


def test_tags_are_flat_across_utterances():
    conv = conv_of("a b", "c d e")
    tags = derive_tags(conv, Frame(0, (0, 1), (ArgumentSpan(1, 1, 3, "ARG0"),)))
    assert tags.labels == ("O", "O", "O", "B-ARG0", "I-ARG0")


@settings(max_examples=200, deadline=None)
@given(instances())
def test_spans_tags_spans_identity(inst):
    conv, frame = inst
    assert sorted(derive_tags(conv, frame).to_spans()) == sorted(frame.arguments)


def test_repair_turns_stray_inside_into_begin():
    assert repair_bio(["O", "I-ARG0", "I-ARG0"], [3]) == ["O", "B-ARG0", "I-ARG0"]
    assert repair_bio(["B-ARG0", "I-ARG1"], [2]) == ["B-ARG0", "B-ARG1"]


def test_repair_restarts_at_utterance_boundary():
    assert repair_bio(["B-ARG0", "I-ARG0"], [1, 1]) == ["B-ARG0", "B-ARG0"]


def test_spans_never_cross_utterances():
    tags = TagSequence(("B-ARG0", "I-ARG0", "I-ARG0"), (2, 1))
    assert tags.to_spans() == [ArgumentSpan(0, 0, 2, "ARG0"), ArgumentSpan(1, 0, 1, "ARG0")]


LABELS = ["O", "B-ARG0", "I-ARG0", "B-ARG1", "I-ARG1"]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4).flatmap(
    lambda lens: st.tuples(st.just(lens), st.lists(st.sampled_from(LABELS), min_size=sum(lens), max_size=sum(lens)))
))
def test_repaired_sequences_are_valid_bio(case):
    lens, labels = case
    fixed = repair_bio(labels, lens)
    starts = {sum(lens[:k]) for k in range(len(lens))}
    for t, lab in enumerate(fixed):
        if lab.startswith("I-"):
            assert t not in starts
            assert fixed[t - 1][2:] == lab[2:]
    # repair is idempotent
    assert repair_bio(fixed, lens) == fixed


@settings(max_examples=100, deadline=None)
@given(instances())
def test_repair_keeps_well_formed_tags(inst):
    conv, frame = inst
    tags = derive_tags(conv, frame)
    assert repair_bio(list(tags.labels), tags.utt_lengths) == list(tags.labels)


# -- utterance types and stats -----------------------------------------------------


def test_utterance_types_examples():
    conv = conv_of("a b c", "d", "e")
    frame = Frame(0, (0, 1), (ArgumentSpan(0, 1, 2, "ARG0"),))
    assert derive_utterance_types(conv, frame) == [
        "predicate-utterance",
        "irrelevant-utterance",
        "irrelevant-utterance",
    ]
    frame = Frame(2, (0, 1), (ArgumentSpan(1, 0, 1, "ARG0"),))
    assert derive_utterance_types(conv, frame) == [
        "irrelevant-utterance",
        "argument-utterance",
        "predicate-utterance",
    ]


@settings(max_examples=100, deadline=None)
@given(instances())
def test_exactly_one_predicate_utterance(inst):
    assert derive_utterance_types(*inst).count("predicate-utterance") == 1


def test_stats_cross_ratio_examples():
    conv = conv_of("a b", "c d")
    intra = Frame(0, (0, 1), (ArgumentSpan(0, 1, 2, "ARG0"),))
    assert corpus.stats([(conv, intra)]).cross_ratio == 0.0
    mixed = Frame(0, (0, 1), (ArgumentSpan(0, 1, 2, "ARG0"), ArgumentSpan(1, 0, 1, "ARG1")))
    st_ = corpus.stats([(conv, mixed)])
    assert st_.cross_ratio == 0.5
    assert (st_.num_dialogs, st_.num_utterances, st_.num_predicates, st_.num_arguments) == (1, 2, 1, 2)


def test_stats_empty_dataset_errors():
    with pytest.raises(CorpusError):
        corpus.stats([])


@settings(max_examples=50, deadline=None)
@given(st.lists(instances(), min_size=1, max_size=6))
def test_stats_cross_ratio_matches_brute_force(data):
    total = cross = 0
    for _, frame in data:
        for arg in frame.arguments:
            total += 1
            cross += arg.utt_index != frame.predicate_utt
    expected = cross / total if total else 0.0
    assert corpus.stats(data).cross_ratio == pytest.approx(expected, abs=0)


# -- splits --------------------------------------------------------------------


def _dialogs(n, per=2):
    out = []
    for d in range(n):
        conv = Conversation(f"d{d}", (Utterance(0, 0, ("x", "y")),), 1)
        out += [(conv, Frame(0, (0, 1)))] * per
    return out


def test_split_sizes():
    tr, dev, te = corpus.split(_dialogs(10, per=1), (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(dev), len(te)) == (8, 1, 1)


def test_split_deterministic():
    assert corpus.split(_dialogs(20), seed=3) == corpus.split(_dialogs(20), seed=3)


def test_split_partition_disjoint_and_dialogue_level():
    data = _dialogs(17, per=3)
    parts = corpus.split(data, seed=7)
    ids = [{c.id for c, _ in part} for part in parts]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set().union(*ids) == {c.id for c, _ in data}
    assert sum(map(len, parts)) == len(data)


@pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (1.0, 0.0), (-0.1, 0.6, 0.5)])
def test_split_invalid_ratios(ratios):
    with pytest.raises(ValueError):
        corpus.split(_dialogs(4), ratios)
