"""Corpus ingestion, whitespace vocabulary, fixed-length packing and MLM masking."""
from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Optional, Sequence

import numpy as np

from .tensor import IGNORE_INDEX

PAD, MASK, CLS, SEP, UNK = "[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"
RESERVED = (PAD, MASK, CLS, SEP, UNK)
PAD_ID, MASK_ID, CLS_ID, SEP_ID, UNK_ID = range(5)
N_RESERVED = len(RESERVED)

CACHE_VERSION = 1
VALID_FRACTION = 0.02


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:N_RESERVED]) != RESERVED:
            raise DataError("vocab must start with the reserved tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocab has duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK_ID) for t in tokenize(text)], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[int(i)] for i in ids)

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocab(corpus: str, max_size: int = 8192) -> Vocab:
    """Most frequent lowercase whitespace tokens (frequency desc, then lexicographic)."""
    words = tokenize(corpus)
    if not words:
        raise DataError("build_vocab: empty corpus")
    if max_size <= N_RESERVED:
        raise DataError(f"build_vocab: max_size must exceed {N_RESERVED}")
    counts = Counter(w for w in words if w not in RESERVED)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(RESERVED) + [w for w, _ in ranked[: max_size - N_RESERVED]])


def corpus_hash(corpus: str) -> str:
    return hashlib.sha256(corpus.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class PackedDataset:
    sequences: np.ndarray  # (n, T) int64
    T: int
    corpus_hash: str = ""
    vocab_hash: str = ""

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_tokens(self) -> int:
        return int(self.sequences.size)

    def hash(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.sequences, dtype="<i4").tobytes())
        h.update(f"{self.T}|{self.corpus_hash}|{self.vocab_hash}".encode())
        return h.hexdigest()[:16]

    def split(self, valid_fraction: float = VALID_FRACTION) -> tuple["PackedDataset", "PackedDataset"]:
        """(train, validation): the validation part is the last sequences by position."""
        n_val = max(1, int(round(len(self) * valid_fraction)))
        if n_val >= len(self):
            raise DataError(f"split: {len(self)} sequences is too few to hold out {n_val}")
        cut = len(self) - n_val
        mk = lambda s: PackedDataset(s, self.T, self.corpus_hash, self.vocab_hash)  # noqa: E731
        return mk(self.sequences[:cut]), mk(self.sequences[cut:])

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        arr = np.ascontiguousarray(self.sequences, dtype="<i4")
        manifest = {"version": CACHE_VERSION, "T": self.T, "n_sequences": len(self),
                    "n_tokens": self.n_tokens, "corpus_hash": self.corpus_hash,
                    "vocab_hash": self.vocab_hash, "dtype": "<i4"}
        with open(os.path.join(directory, "ids.bin"), "wb") as f:
            f.write(arr.tobytes())
        with open(os.path.join(directory, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2)

    @classmethod
    def load(cls, directory) -> "PackedDataset":
        with open(os.path.join(directory, "manifest.json")) as f:
            m = json.load(f)
        for key in ("version", "T", "n_sequences", "corpus_hash", "vocab_hash"):
            if key not in m:
                raise DataError(f"dataset manifest: missing field {key!r}")
        if m["version"] != CACHE_VERSION:
            raise DataError(f"dataset manifest: version {m['version']} != {CACHE_VERSION}")
        raw = np.fromfile(os.path.join(directory, "ids.bin"), dtype="<i4")
        if raw.size != m["n_sequences"] * m["T"]:
            raise DataError("dataset cache: ids.bin size does not match manifest")
        return cls(raw.reshape(m["n_sequences"], m["T"]).astype(np.int64), m["T"],
                   m["corpus_hash"], m["vocab_hash"])


def pack_ids(ids: np.ndarray, T: int) -> np.ndarray:
    if T < 2:
        raise DataError(f"pack: T must be >= 2, got {T}")
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    n = len(ids) // T
    if n == 0:
        raise DataError(f"pack: {len(ids)} tokens is fewer than T={T}")
    return ids[: n * T].reshape(n, T)


def documents(corpus: str) -> list[str]:
    return [d for d in corpus.split("\n\n") if d.strip()]


def pack(corpus: str, vocab: Vocab, T: int, pack_mode: str = "concat") -> PackedDataset:
    """Tokenize and slice into exact-length sequences, dropping the remainder.

    ``concat`` joins all documents into one stream; ``document`` packs each
    blank-line separated document on its own so no sequence crosses a boundary.
    """
    if pack_mode == "concat":
        seqs = pack_ids(vocab.encode(corpus), T)
    elif pack_mode == "document":
        if T < 2:
            raise DataError(f"pack: T must be >= 2, got {T}")
        chunks = []
        for doc in documents(corpus):
            ids = vocab.encode(doc)
            n = len(ids) // T
            if n:
                chunks.append(ids[: n * T].reshape(n, T))
        if not chunks:
            raise DataError(f"pack: no document has at least T={T} tokens")
        seqs = np.concatenate(chunks)
    else:
        raise DataError(f"pack: unknown pack_mode {pack_mode!r}")
    return PackedDataset(seqs, T, corpus_hash(corpus), vocab.hash())


def mask_batch(batch, mlm_prob: float, rng, vocab_size: int):
    """BERT-style corruption.

    Each non-reserved position is selected with probability ``mlm_prob``;
    selected positions become [MASK] (80%), a uniform random non-reserved token
    (10%) or stay unchanged (10%).  Returns ``(corrupted, labels, positions)``
    where labels hold the original id at selected positions and
    ``IGNORE_INDEX`` elsewhere, and positions is a boolean selection mask.
    """
    batch = np.asarray(batch, dtype=np.int64)
    selectable = batch >= N_RESERVED
    selected = (rng.random(batch.shape) < mlm_prob) & selectable
    branch = rng.random(batch.shape)
    random_ids = rng.integers(N_RESERVED, vocab_size, size=batch.shape)
    corrupted = batch.copy()
    corrupted[selected & (branch < 0.8)] = MASK_ID
    swap = selected & (branch >= 0.8) & (branch < 0.9)
    corrupted[swap] = random_ids[swap]
    labels = np.where(selected, batch, IGNORE_INDEX)
    return corrupted, labels, selected


# desk corpus ------------------------------------------------------------------

def default_corpus() -> str:
    """The bundled synthetic text corpus."""
    return resources.files("outlier_lab").joinpath("corpus/desk_corpus.txt").read_text(encoding="utf-8")


_TOPICS = {
    "forest": {
        "noun": ["fox", "owl", "deer", "wolf", "bear", "rabbit", "squirrel", "badger", "hawk", "beetle"],
        "place": ["forest", "meadow", "river", "valley", "hill", "cave", "marsh", "glade"],
        "verb": ["chase", "watch", "follow", "hunt", "find", "avoid", "hear", "greet"],
        "adj": ["quick", "brown", "quiet", "wild", "small", "old", "grey", "shy"],
        "thing": ["berries", "nuts", "leaves", "seeds", "mushrooms", "roots"],
    },
    "city": {
        "noun": ["driver", "baker", "clerk", "artist", "doctor", "teacher", "student", "banker", "poet", "guard"],
        "place": ["market", "station", "library", "bridge", "square", "museum", "harbor", "tower"],
        "verb": ["visit", "call", "help", "meet", "thank", "ask", "pay", "invite"],
        "adj": ["busy", "tired", "young", "kind", "clever", "famous", "polite", "late"],
        "thing": ["tickets", "letters", "coins", "books", "papers", "keys"],
    },
    "sea": {
        "noun": ["sailor", "captain", "fisher", "diver", "pirate", "whale", "seal", "gull", "crab", "dolphin"],
        "place": ["ship", "island", "reef", "shore", "bay", "lighthouse", "dock", "lagoon"],
        "verb": ["spot", "signal", "carry", "steer", "rescue", "catch", "pull", "chart"],
        "adj": ["salty", "brave", "strong", "lost", "calm", "distant", "wet", "bold"],
        "thing": ["nets", "ropes", "shells", "maps", "sails", "pearls"],
    },
    "kitchen": {
        "noun": ["cook", "chef", "waiter", "guest", "butler", "farmer", "grocer", "host", "child", "cat"],
        "place": ["kitchen", "pantry", "garden", "table", "oven", "cellar", "stove", "window"],
        "verb": ["serve", "taste", "prepare", "wash", "bake", "stir", "share", "slice"],
        "adj": ["hungry", "careful", "happy", "patient", "messy", "cheerful", "proud", "sleepy"],
        "thing": ["bread", "soup", "apples", "cheese", "cakes", "onions"],
    },
}
_NUMBERS = ["two", "three", "four", "five", "six", "seven"]
_TIMES = ["morning", "evening", "night", "noon", "dawn", "winter", "summer", "spring"]


def _plural(noun: str) -> str:
    if noun.endswith(("s", "sh", "ch", "x")):
        return noun + "es"
    if noun.endswith("f"):
        return noun[:-1] + "ves"
    if noun.endswith("y") and noun[-2] not in "aeiou":
        return noun[:-1] + "ies"
    return noun + "s"


def _third(verb: str) -> str:
    if verb.endswith(("s", "sh", "ch", "x")):
        return verb + "es"
    if verb.endswith("y") and verb[-2] not in "aeiou":
        return verb[:-1] + "ies"
    return verb + "s"


def _sentence(rng: np.random.Generator, topic: dict) -> str:
    pick = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
    plural = rng.random() < 0.4
    subj = pick(topic["noun"])
    det = pick(["the", "a", "one", "every"]) if not plural else pick(["the", "some", "many", pick(_NUMBERS)])
    subj_w = _plural(subj) if plural else subj
    verb = pick(topic["verb"])
    verb_w = verb if plural else _third(verb)
    obj = pick(topic["noun"])
    kind = int(rng.integers(5))
    if kind == 0:
        s = f"{det} {pick(topic['adj'])} {subj_w} {verb_w} the {obj} near the {pick(topic['place'])}"
    elif kind == 1:
        aux = "were" if plural else "was"
        s = f"in the {pick(_TIMES)} {det} {subj_w} {aux} at the {pick(topic['place'])} with {pick(topic['thing'])}"
    elif kind == 2:
        pron = "they" if plural else pick(["he", "she"])
        rest = pick(["rest", "leave", "wait", "sing"])
        s = f"{det} {subj_w} {verb_w} the {pick(topic['adj'])} {obj} and then {pron} {rest if plural else _third(rest)}"
    elif kind == 3:
        have = "have" if plural else "has"
        s = f"{det} {subj_w} {have} {pick(_NUMBERS)} {pick(topic['thing'])} from the {pick(topic['place'])}"
    else:
        s = f"because the {pick(topic['place'])} is {pick(topic['adj'])} {det} {subj_w} {verb_w} the {_plural(obj)}"
    return s + " ."


def synthetic_corpus(n_docs: int = 2000, seed: int = 0, sentences=(6, 14)) -> str:
    """Topic-coherent documents from a small agreement grammar.

    Context helps: the topic fixes the noun/verb/place pool for the whole
    document, and number agreement links subject, verb and auxiliaries.
    """
    rng = np.random.default_rng(seed)
    names = sorted(_TOPICS)
    docs = []
    for _ in range(n_docs):
        topic = _TOPICS[names[int(rng.integers(len(names)))]]
        n = int(rng.integers(sentences[0], sentences[1] + 1))
        docs.append(" ".join(_sentence(rng, topic) for _ in range(n)))
    return "\n\n".join(docs) + "\n"
