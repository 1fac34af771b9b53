import numpy as np
import pytest

from bislu import compute as C
from bislu.compute import RngState
from bislu.data import AnnotatedUtterance
from bislu.encoder import CLS, PAD, UNK, Encoder, EncoderConfig, SequenceTooLong, Vocab, build_vocab

TINY = EncoderConfig(d=8, layers=2, heads=2, ffn_dim=16, dropout_rate=0.2, max_seq_len=10)


def utt(text):
    return AnnotatedUtterance(tuple(text.split()), ("i",), ())


class TestVocab:
    def test_min_freq_one(self):
        v = build_vocab([utt("a b"), utt("a")])
        assert v.tokens == [CLS, PAD, UNK, "a", "b"]

    def test_min_freq_two(self):
        v = build_vocab([utt("a b"), utt("a")], min_freq=2)
        assert v.tokens == [CLS, PAD, UNK, "a"]
        assert v.piece_ids("b") == [v.unk_id]

    def test_frequency_then_lexicographic(self):
        v = build_vocab([utt("c b b a")])
        assert v.tokens[3:] == ["b", "a", "c"]

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_lowercases(self):
        v = build_vocab([utt("Atlanta")])
        assert "atlanta" in v and v.piece_ids("ATLANTA") == [3]

    def test_save_load(self, tmp_path):
        v = build_vocab([utt("to atlanta from boston")], pieces={"atlanta": ["at", "##lanta"]})
        v.save(tmp_path / "vocab.txt")
        w = Vocab.load(tmp_path / "vocab.txt", v.pieces)
        assert w.tokens == v.tokens
        assert w.piece_ids("atlanta") == v.piece_ids("atlanta")
        assert len(w.piece_ids("atlanta")) == 2


@pytest.fixture
def setup():
    vocab = build_vocab([utt("show flights from boston to denver"), utt("cheap fares")],
                        pieces={"boston": ["bos", "##ton"]})
    enc = Encoder(TINY, len(vocab), RngState(0))
    return enc, vocab


def test_shapes(setup):
    enc, vocab = setup
    one = enc.encode(["show"], vocab)
    assert one.c.shape == (1, 8) and one.c0.shape == (8,)
    out = enc.encode_batch([["show", "flights"], ["cheap", "fares", "to", "boston"]], vocab)
    assert out.c.shape == (2, 4, 8) and out.c0.shape == (2, 8)
    np.testing.assert_array_equal(out.c.data[0, 2:], 0.0)


def test_eval_is_deterministic(setup):
    enc, vocab = setup
    a = enc.encode("show flights to denver".split(), vocab)
    b = enc.encode("show flights to denver".split(), vocab)
    np.testing.assert_array_equal(a.c.data, b.c.data)
    np.testing.assert_array_equal(a.c0.data, b.c0.data)


def test_padding_does_not_leak(setup):
    enc, vocab = setup
    alone = enc.encode_batch([["cheap", "fares"]], vocab)
    padded = enc.encode_batch([["cheap", "fares"], ["show", "flights", "from", "boston", "to", "denver"]], vocab)
    np.testing.assert_allclose(padded.c.data[0, :2], alone.c.data[0], atol=1e-5)
    np.testing.assert_allclose(padded.c0.data[0], alone.c0.data[0], atol=1e-5)


def test_subword_pooling_is_additive(setup):
    enc, vocab = setup
    words = "flights from boston".split()
    out = enc.encode_batch([words], vocab, keep_pieces=True)
    hidden = out.pieces.data[0]
    # piece layout: [CLS] flights from bos ##ton
    np.testing.assert_allclose(out.c.data[0, 2], hidden[3] + hidden[4], atol=1e-6)
    np.testing.assert_allclose(out.c.data[0, 0], hidden[1], atol=1e-6)
    np.testing.assert_allclose(out.c0.data[0], hidden[0], atol=1e-6)


def test_too_long_is_an_error(setup):
    enc, vocab = setup
    with pytest.raises(SequenceTooLong):
        enc.encode(["show"] * 11, vocab)
    with pytest.raises(SequenceTooLong):
        enc.encode(["boston"] * 6, vocab)  # 6 words but 12 pieces


def test_unknown_words_encode(setup):
    enc, vocab = setup
    assert np.all(np.isfinite(enc.encode(["zzz", "qqq"], vocab).c.data))


def test_bad_mode(setup):
    enc, vocab = setup
    with pytest.raises(ValueError):
        enc.encode(["show"], vocab, mode="dev")


class TestViews:
    def test_single_view_equals_train_encode(self, setup):
        enc, vocab = setup
        words = "show flights to denver".split()
        (v,) = enc.encode_views(words, vocab, 1, RngState(4))
        e = enc.encode(words, vocab, mode="train", rng=RngState(4))
        np.testing.assert_array_equal(v.c.data, e.c.data)
        assert v.view_id == 0

    def test_views_differ(self, setup):
        enc, vocab = setup
        views = enc.encode_views("show flights to denver".split(), vocab, 3, RngState(1))
        assert [v.view_id for v in views] == [0, 1, 2]
        assert not np.array_equal(views[0].c.data, views[1].c.data)

    def test_zero_views(self, setup):
        enc, vocab = setup
        with pytest.raises(ValueError):
            enc.encode_views(["show"], vocab, 0, RngState(0))

    def test_per_view_rates(self):
        cfg = EncoderConfig(d=8, layers=1, heads=2, ffn_dim=8, dropout_rate=0.3, view_dropout_rates=(0.0, 0.5))
        vocab = build_vocab([utt("a b c")])
        enc = Encoder(cfg, len(vocab), RngState(0))
        views = enc.encode_views(["a", "b", "c"], vocab, 2, RngState(2))
        clean = enc.encode(["a", "b", "c"], vocab)
        np.testing.assert_allclose(views[0].c.data, clean.c.data, atol=1e-6)
        assert not np.allclose(views[1].c.data, clean.c.data)

    def test_zero_dropout_views_identical(self):
        cfg = EncoderConfig(d=8, layers=1, heads=2, ffn_dim=8, dropout_rate=0.0)
        vocab = build_vocab([utt("a b")])
        enc = Encoder(cfg, len(vocab), RngState(0))
        a, b = enc.encode_views(["a", "b"], vocab, 2, RngState(0))
        np.testing.assert_array_equal(a.c.data, b.c.data)


def test_gradients_reach_token_embeddings():
    with C.precision(np.float64):
        vocab = build_vocab([utt("a b c")])
        enc = Encoder(EncoderConfig(d=8, layers=2, heads=2, ffn_dim=8, dropout_rate=0.1), len(vocab), RngState(3))
        w = np.random.default_rng(0).normal(size=(1, 3, 8))
        w0 = np.random.default_rng(1).normal(size=(1, 8))

        def f():
            out = enc.encode_batch([["a", "b", "c"]], vocab, training=True, rng=RngState(9))
            return (out.c * w).sum() + (out.c0 * w0).sum()

        err = C.finite_diff_check(f, [enc.tok_emb, enc.pos_emb], 1e-5)
    assert err < 1e-4
    assert np.abs(enc.tok_emb.grad[3:6]).sum() > 0
    assert np.abs(enc.tok_emb.grad[vocab.cls_id]).sum() > 0
