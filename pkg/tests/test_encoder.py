import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csagn import tensor as T
from csagn.corpus import Conversation, Frame, Utterance
from csagn.encoder import (
    Vocab,
    attention_block,
    build_full_mask,
    build_predicate_mask,
    embed_tokens,
    encode,
    init_encoder,
    multi_head_attention,
    pool_utterances,
)
from csagn.tensor import Tensor
from strategies import conversations


def conv_of(*utts):
    return Conversation("c", tuple(Utterance(i, i % 2, tuple(u.split())) for i, u in enumerate(utts)), min(2, len(utts)))


def small_params(vocab_size=10, seed=0, **kw):
    kw.setdefault("d_enc", 8)
    kw.setdefault("d_graph", 6)
    kw.setdefault("num_heads", 2)
    kw.setdefault("max_len", 64)
    return init_encoder(np.random.default_rng(seed), vocab_size, **kw)


def brute_mask(conv, kp):
    utt = conv.token_utterance()
    n = len(utt)
    return np.array([[utt[i] == utt[j] or utt[j] == kp for j in range(n)] for i in range(n)])


# -- vocabulary ---------------------------------------------------------------------


def test_vocab_reserved_ids_and_unk():
    v = Vocab(["x", "y"])
    assert v["<unk>"] == 0 and v["<pad>"] == 1
    assert v.encode(["y", "zzz"]) == [3, 0]


def test_vocab_file_round_trip(tmp_path):
    v = Vocab(["x", "y", "z"])
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines[:2] == ["<unk>", "<pad>"]
    assert Vocab.load(tmp_path / "vocab.txt").itos == v.itos


# -- masks ----------------------------------------------------------------------


def test_single_utterance_mask_is_all_ones():
    assert build_predicate_mask(conv_of("a b c"), 0).all()


def test_mask_for_predicate_in_last_of_four_utterances():
    conv = conv_of("a b", "c", "d e f", "g h")
    mask = build_predicate_mask(conv, 3)
    utt = np.array(conv.token_utterance())
    for i in range(len(utt)):
        allowed = set(np.nonzero(mask[i])[0])
        if utt[i] == 3:
            assert allowed == set(np.nonzero(utt == 3)[0])
        else:
            assert allowed == set(np.nonzero((utt == utt[i]) | (utt == 3))[0])


@settings(max_examples=150, deadline=None)
@given(conversations(max_utts=8, max_len=8), st.data())
def test_mask_matches_brute_force(conv, data):
    kp = data.draw(st.integers(0, len(conv) - 1))
    mask = build_predicate_mask(conv, kp)
    np.testing.assert_array_equal(mask, brute_mask(conv, kp))
    assert mask.diagonal().all()


@settings(max_examples=50, deadline=None)
@given(conversations(max_utts=5), st.data())
def test_mask_depends_only_on_membership(conv, data):
    kp = data.draw(st.integers(0, len(conv) - 1))
    k = data.draw(st.integers(0, len(conv) - 1))
    utts = list(conv.utterances)
    utts[k] = Utterance(k, utts[k].speaker, tuple(reversed(utts[k].tokens)))
    shuffled = Conversation(conv.id, tuple(utts), conv.num_speakers)
    np.testing.assert_array_equal(build_predicate_mask(conv, kp), build_predicate_mask(shuffled, kp))


def test_full_mask_is_all_ones():
    assert build_full_mask(conv_of("a b", "c")).all()


# -- embeddings ------------------------------------------------------------------


def test_zero_tables_give_zero_embedding():
    prm = small_params()
    for t in (prm.token_emb, prm.position_emb, prm.predicate_emb):
        t.data[:] = 0.0
    conv = conv_of("a")
    e = embed_tokens(conv, Frame(0, (0, 1)), prm, Vocab(["a"]))
    np.testing.assert_array_equal(e.data, np.zeros((1, 8)))


def test_position_term_separates_identical_tokens():
    conv = conv_of("a a")
    e = embed_tokens(conv, Frame(0, (0, 1)), small_params(), Vocab(["a"])).data
    assert not np.allclose(e[0], e[1])


def test_predicate_indicator_difference():
    prm = small_params()
    vocab = Vocab(["a"])
    conv = conv_of("a a")
    e0 = embed_tokens(conv, Frame(0, (0, 1)), prm, vocab).data
    e1 = embed_tokens(conv, Frame(0, (1, 2)), prm, vocab).data
    diff = prm.predicate_emb.data[1] - prm.predicate_emb.data[0]
    np.testing.assert_allclose(e0[0] - e1[0], diff)
    np.testing.assert_allclose(e1[1] - e0[1], diff)


def test_too_long_sequence_errors():
    prm = small_params(max_len=3)
    with pytest.raises(ValueError, match="max_len"):
        embed_tokens(conv_of("a b", "c d"), Frame(0, (0, 1)), prm, Vocab(["a"]))


# -- attention ---------------------------------------------------------------------


def test_identity_mask_isolates_rows():
    rng = np.random.default_rng(1)
    blk = small_params().blocks[0]
    x = rng.normal(size=(5, 8))
    eye = np.eye(5, dtype=bool)
    base = attention_block(Tensor(x), eye, blk, 2).data
    x2 = x.copy()
    x2[3] += rng.normal(size=8)
    moved = attention_block(Tensor(x2), eye, blk, 2).data
    changed = ~np.isclose(base, moved).all(axis=1)
    assert changed.tolist() == [False, False, False, True, False]


def test_all_ones_mask_equals_unmasked_attention():
    rng = np.random.default_rng(2)
    blk = small_params().blocks[0]
    x = Tensor(rng.normal(size=(6, 8)))
    masked, _ = multi_head_attention(x, np.ones((6, 6), bool), blk, 2)
    # reference: plain scaled dot-product attention, no mask at all
    q, k, v = (x.data @ w.data for w in (blk.w_q, blk.w_k, blk.w_v))
    heads = []
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        s = q[:, sl] @ k[:, sl].T / 2.0
        a = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append((a / a.sum(axis=1, keepdims=True)) @ v[:, sl])
    ref = np.concatenate(heads, axis=1) @ blk.w_o.data + blk.b_o.data
    np.testing.assert_allclose(masked.data, ref, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(conversations(max_utts=5, max_len=5), st.data())
def test_masked_weights_are_exactly_zero(conv, data):
    kp = data.draw(st.integers(0, len(conv) - 1))
    mask = build_predicate_mask(conv, kp)
    rng = np.random.default_rng(data.draw(st.integers(0, 1000)))
    x = Tensor(rng.normal(size=(conv.num_tokens, 8)))
    _, w = attention_block(x, mask, small_params().blocks[0], 2, return_weights=True)
    assert (w.data[:, ~mask] == 0.0).all()
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)


# -- encode and pooling --------------------------------------------------------------


def test_single_token_pooling_is_projection():
    prm = small_params()
    conv = conv_of("a")
    _, p, u = encode(conv, Frame(0, (0, 1)), prm, Vocab(["a"]))
    np.testing.assert_allclose(u.data, p.data @ prm.proj_w.data + prm.proj_b.data)


def test_default_width_of_utterance_vectors():
    prm = init_encoder(np.random.default_rng(0), 20)
    conv = conv_of("a b", "c", "d e")
    e, p, u = encode(conv, Frame(1, (0, 1)), prm, Vocab(list("abcde")))
    assert e.shape == p.shape == (5, 64)
    assert u.shape == (3, 100)
    assert len(prm.blocks) == 4 and prm.num_heads == 4


def test_pooling_matches_brute_force_max():
    rng = np.random.default_rng(4)
    prm = small_params()
    rows = rng.normal(size=(9, 8))
    seg = [0, 0, 1, 2, 2, 2, 1, 0, 2]
    u = pool_utterances(Tensor(rows), seg, 3, prm).data
    for k in range(3):
        best = np.max([rows[i] for i in range(9) if seg[i] == k], axis=0)
        np.testing.assert_allclose(u[k], best @ prm.proj_w.data + prm.proj_b.data)


def test_full_attention_path_uses_all_ones_mask():
    prm = small_params()
    conv = conv_of("a b", "c", "a c")
    frame = Frame(2, (0, 1))
    vocab = Vocab(["a", "b", "c"])
    _, p_full, _ = encode(conv, frame, prm, vocab, full_attention=True)
    e = embed_tokens(conv, frame, prm, vocab)
    from csagn.encoder import contextualize

    np.testing.assert_allclose(p_full.data, contextualize(e, np.ones((5, 5), bool), prm).data)
    _, p_masked, _ = encode(conv, frame, prm, vocab)
    assert not np.allclose(p_full.data, p_masked.data)


def test_bypassing_attention_gives_p_equal_e():
    prm = small_params()
    e, p, _ = encode(conv_of("a b", "c"), Frame(0, (0, 1)), prm, Vocab(["a"]), predicate_aware=False)
    assert p is e


def test_encoder_gradients_reach_all_blocks():
    prm = small_params()
    conv = conv_of("a b", "c")
    _, _, u = encode(conv, Frame(0, (0, 1)), prm, Vocab(["a", "b", "c"]))
    T.backward(T.sum_(u * u))
    for blk in prm.blocks:
        assert np.abs(blk.w_q.grad).sum() > 0
