import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from outlier_lab.data import (MASK_ID, N_RESERVED, RESERVED, UNK_ID, DataError, PackedDataset, Vocab, build_vocab,
                              mask_batch, pack, pack_ids, synthetic_corpus)
from outlier_lab.tensor import IGNORE_INDEX


def test_reserved_ids_fixed():
    v = build_vocab("x y")
    assert v.itos[:5] == ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"]
    assert MASK_ID == 1 and UNK_ID == 4


def test_vocab_frequency_ordering():
    v = build_vocab("a a b", 7)
    assert v.stoi["a"] == 5 and v.stoi["b"] == 6 and len(v) == 7
    assert build_vocab("b a c c").itos[5:] == ["c", "a", "b"]
    assert len(build_vocab("a b c d e f", 7)) == 7


def test_vocab_errors_and_unknown():
    with pytest.raises(DataError):
        build_vocab("   ")
    with pytest.raises(DataError):
        build_vocab("a", 5)
    assert build_vocab("a b").encode("a zzz").tolist() == [5, UNK_ID]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["the", "cat", "sat", "on", "mat", "dog"]), min_size=1, max_size=40))
def test_encode_decode_roundtrip(words):
    text = " ".join(words)
    v = build_vocab(text)
    assert v.decode(v.encode(text)) == text


def test_vocab_save_load(tmp_path):
    v = build_vocab("q w e q")
    v.save(tmp_path / "v.txt")
    w = Vocab.load(tmp_path / "v.txt")
    assert w.itos == v.itos and w.hash() == v.hash()


def test_pack_arithmetic():
    text = " ".join(f"w{i}" for i in range(10))
    ds = pack(text, build_vocab(text), 3)
    assert ds.sequences.shape == (3, 3)
    assert ds.sequences.reshape(-1).tolist() == list(build_vocab(text).encode(text)[:9])


def test_pack_errors():
    v = build_vocab("a b c")
    with pytest.raises(DataError):
        pack("a b", v, 3)
    with pytest.raises(DataError):
        pack("a b c", v, 1)
    with pytest.raises(DataError):
        pack("a b c", v, 2, "shuffle")


def test_pack_is_deterministic(corpus, vocab):
    assert pack(corpus, vocab, 32).hash() == pack(corpus, vocab, 32).hash()


def test_repacking_preserves_tokens(corpus, vocab):
    n = len(vocab.encode(corpus))
    for T in (64, 128):
        ds = pack(corpus, vocab, T)
        assert ds.n_tokens == n - n % T


def test_document_mode_never_crosses_boundaries():
    docs = ["a b c d e", "f g h", "i j k l"]
    text = "\n\n".join(docs)
    v = build_vocab(text)
    ds = pack(text, v, 2, "document")
    doc_of = {t: i for i, d in enumerate(docs) for t in d.split()}
    for row in ds.sequences:
        assert len({doc_of[v.itos[t]] for t in row}) == 1
    assert len(ds) == 2 + 1 + 2


def test_split_holds_out_tail(packed16):
    tr, va = packed16.split(0.02)
    assert len(tr) + len(va) == len(packed16)
    np.testing.assert_array_equal(va.sequences, packed16.sequences[-len(va):])
    assert len(va) == round(len(packed16) * 0.02)


def test_dataset_cache_roundtrip(tmp_path, packed16):
    packed16.save(tmp_path / "c")
    back = PackedDataset.load(tmp_path / "c")
    assert back.hash() == packed16.hash()
    assert (tmp_path / "c" / "ids.bin").stat().st_size == packed16.n_tokens * 4


def test_dataset_cache_rejects_truncation(tmp_path, packed16):
    packed16.save(tmp_path / "c")
    with open(tmp_path / "c" / "ids.bin", "r+b") as f:
        f.truncate(100)
    with pytest.raises(DataError):
        PackedDataset.load(tmp_path / "c")


def test_mask_prob_zero_is_identity():
    b = np.random.default_rng(0).integers(5, 50, size=(4, 16))
    c, labels, pos = mask_batch(b, 0.0, np.random.default_rng(1), 50)
    np.testing.assert_array_equal(c, b)
    assert not pos.any() and np.all(labels == IGNORE_INDEX)


class ForcedMaskRng:
    """Selects everything and always lands in the [MASK] branch."""

    def random(self, shape):
        return np.zeros(shape)

    def integers(self, lo, hi, size):
        return np.full(size, lo)


def test_mask_prob_one_forced_branch():
    b = np.random.default_rng(0).integers(5, 50, size=(2, 8))
    c, labels, pos = mask_batch(b, 1.0, ForcedMaskRng(), 50)
    assert np.all(c == MASK_ID) and pos.all()
    np.testing.assert_array_equal(labels, b)


def test_reserved_tokens_never_selected():
    b = np.tile(np.arange(N_RESERVED), (3, 2))
    _, _, pos = mask_batch(b, 0.9, np.random.default_rng(0), 50)
    assert not pos.any()


def test_selection_rate_and_branch_split():
    b = np.random.default_rng(0).integers(5, 1000, size=(100, 1000))
    c, labels, pos = mask_batch(b, 0.15, np.random.default_rng(2), 1000)
    assert abs(pos.mean() - 0.15) < 0.01
    masked = (c == MASK_ID)[pos].mean()
    kept = (c == b)[pos].mean()
    assert abs(masked - 0.8) < 0.01 and abs(kept - 0.1 - 0.001) < 0.01
    np.testing.assert_array_equal(labels[pos], b[pos])
    np.testing.assert_array_equal(c[~pos], b[~pos])


def test_masking_reproducible():
    b = np.random.default_rng(0).integers(5, 50, size=(4, 16))
    x = mask_batch(b, 0.15, np.random.default_rng(3), 50)
    y = mask_batch(b, 0.15, np.random.default_rng(3), 50)
    for p, q in zip(x, y):
        np.testing.assert_array_equal(p, q)


def test_bundled_corpus_matches_generator(corpus):
    assert corpus == synthetic_corpus(2000, 0)
    assert set(RESERVED).isdisjoint(corpus.split())
