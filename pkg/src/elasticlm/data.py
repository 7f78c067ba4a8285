"""Byte-level tokenization and the deterministic synthetic corpora.

Token ids 0-3 are special symbols; printable ASCII text maps to its byte
values; ids 128-255 never occur in text and serve as topic markers for the
synthetic retrieval task.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, CLS, SEP, MASK = 0, 1, 2, 3
MARKER_BASE = 128
N_MARKERS = 128

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def encode(text: str | bytes) -> np.ndarray:
    raw = text.encode("ascii", errors="replace") if isinstance(text, str) else bytes(text)
    ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    # Keep control bytes out of the special-id range.
    ids[ids < 32] = ord(" ")
    ids[ids >= 128] = ord("?")
    return ids


def decode(ids) -> str:
    return bytes(int(i) for i in ids if 32 <= int(i) < 128).decode("ascii")


def with_cls(ids) -> np.ndarray:
    return np.concatenate([[CLS], np.asarray(ids, dtype=np.int64)])


def pad_batch(seqs: list, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad sequences with PAD; returns (tokens, attention_mask)."""
    length = length or max(len(s) for s in seqs)
    tokens = np.full((len(seqs), length), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        s = np.asarray(s)[:length]
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = True
    return tokens, mask


# ---------------------------------------------------------------------------
# Pretraining corpus
# ---------------------------------------------------------------------------

def make_lexicon(n_words: int, rng: np.random.Generator) -> list[str]:
    words: set[str] = set()
    while len(words) < n_words:
        syll = rng.integers(1, 4)
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syll))
        if rng.random() < 0.3:
            w += rng.choice(list(_CONSONANTS))
        words.add(w)
    return sorted(words)


def synthetic_corpus(n_bytes: int = 1 << 20, seed: int = 0, n_words: int = 400) -> bytes:
    """Text from a sparse first-order word Markov chain.

    Each word has a handful of likely successors, so masked characters are
    predictable from spelling and from the neighbouring words.
    """
    rng = np.random.default_rng(seed)
    lexicon = make_lexicon(n_words, rng)
    successors = rng.integers(0, n_words, size=(n_words, 6))
    succ_p = rng.dirichlet(np.full(6, 0.7), size=n_words)
    out: list[str] = []
    size = 0
    word = int(rng.integers(n_words))
    while size < n_bytes:
        length = int(rng.integers(5, 16))
        sentence = []
        for _ in range(length):
            sentence.append(lexicon[word])
            if rng.random() < 0.1:
                word = int(rng.integers(n_words))
            else:
                word = int(successors[word, rng.choice(6, p=succ_p[word])])
        s = " ".join(sentence).capitalize() + ". "
        out.append(s)
        size += len(s)
    return "".join(out).encode("ascii")[:n_bytes]


def fixture_corpus(path: str | Path | None = None, n_bytes: int = 1 << 20, seed: int = 0) -> bytes:
    """Load the corpus fixture from ``path``, generating and writing it if absent."""
    if path is None:
        return synthetic_corpus(n_bytes, seed)
    path = Path(path)
    if path.exists():
        return path.read_bytes()
    data = synthetic_corpus(n_bytes, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return data


@dataclass
class CorpusSplit:
    train: np.ndarray
    heldout: np.ndarray


def split_corpus(corpus: bytes, heldout_fraction: float = 0.05) -> CorpusSplit:
    ids = encode(corpus)
    cut = int(len(ids) * (1.0 - heldout_fraction))
    return CorpusSplit(ids[:cut], ids[cut:])


def sample_windows(ids: np.ndarray, batch: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    """Random windows of ``seq_len - 1`` tokens, each prefixed with CLS."""
    starts = rng.integers(0, len(ids) - seq_len, size=batch)
    body = np.stack([ids[s : s + seq_len - 1] for s in starts])
    return np.concatenate([np.full((batch, 1), CLS), body], axis=1)


def fixed_windows(ids: np.ndarray, count: int, seq_len: int) -> np.ndarray:
    """Evenly spaced deterministic windows (for held-out evaluation)."""
    step = max(1, (len(ids) - seq_len) // count)
    body = np.stack([ids[i * step : i * step + seq_len - 1] for i in range(count)])
    return np.concatenate([np.full((count, 1), CLS), body], axis=1)


def mask_tokens(tokens: np.ndarray, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Replace ``rate`` of non-special positions with MASK.

    Returns (inputs, targets) where targets hold the original id at masked
    positions and -100 elsewhere. At least one position per batch is masked.
    """
    eligible = tokens > MASK
    chosen = (rng.random(tokens.shape) < rate) & eligible
    if not chosen.any():
        rows, cols = np.nonzero(eligible)
        k = rng.integers(len(rows))
        chosen[rows[k], cols[k]] = True
    inputs = np.where(chosen, MASK, tokens)
    targets = np.where(chosen, tokens, -100)
    return inputs, targets


# ---------------------------------------------------------------------------
# Synthetic retrieval task
# ---------------------------------------------------------------------------

@dataclass
class Passage:
    pid: int
    tokens: np.ndarray
    marker: int

    @property
    def token_set(self) -> frozenset:
        cached = self.__dict__.get("_token_set")
        if cached is None:
            cached = self.__dict__["_token_set"] = frozenset(int(t) for t in self.tokens)
        return cached


class RetrievalTask:
    """Passages made of filler words with one embedded topic-marker token.

    A query carries its positive passage's marker plus a few words, some
    copied from that passage and some random, so word overlap alone points at
    the wrong passages while the marker identifies the right one.
    """

    def __init__(self, seed: int = 0, n_words: int = 60, passage_words: int = 5, query_words: int = 2):
        self.rng = np.random.default_rng(seed)
        self.lexicon = make_lexicon(n_words, np.random.default_rng(seed + 1))
        self.passage_words = passage_words
        self.query_words = query_words

    def _words(self, count: int) -> list[str]:
        return [self.lexicon[i] for i in self.rng.integers(len(self.lexicon), size=count)]

    def passage(self, pid: int, marker: int) -> Passage:
        words = self._words(self.passage_words)
        pos = int(self.rng.integers(len(words) + 1))
        parts: list = []
        for i, w in enumerate(words):
            if i == pos:
                parts.append(np.array([MARKER_BASE + marker]))
            parts.append(encode(w + " "))
        if pos == len(words):
            parts.append(np.array([MARKER_BASE + marker]))
        return Passage(pid, np.concatenate(parts).astype(np.int64), marker)

    def corpus(self, n_passages: int, start_pid: int = 0) -> list[Passage]:
        """Passages whose markers cycle through all markers before repeating."""
        markers = np.concatenate([self.rng.permutation(N_MARKERS)
                                  for _ in range(-(-n_passages // N_MARKERS))])[:n_passages]
        return [self.passage(start_pid + i, int(m)) for i, m in enumerate(markers)]

    def query(self, positive: Passage) -> np.ndarray:
        text = decode(positive.tokens).split()
        copied = list(self.rng.choice(text, size=min(self.query_words, len(text)), replace=False))
        words = copied + self._words(1)
        self.rng.shuffle(words)
        return np.concatenate([[MARKER_BASE + positive.marker], encode(" ".join(words))]).astype(np.int64)


def lexical_overlap_negatives(query: np.ndarray, passages: list[Passage], positive_pid: int,
                              k: int, exclude: set[int] | None = None) -> list[int]:
    """Passage ids ranked by token-set overlap with ``query``.

    Stand-in for a lexical first-stage retriever. The positive and any id in
    ``exclude`` are skipped; ties break by lower id.
    """
    q = set(int(t) for t in query)
    skip = {positive_pid} | (exclude or set())
    scored = [(-len(q & p.token_set), p.pid) for p in passages if p.pid not in skip]
    scored.sort()
    return [pid for _, pid in scored[:k]]


# ---------------------------------------------------------------------------
# Toy classification task
# ---------------------------------------------------------------------------

class ClassificationTask:
    """Two word families; the label is the family of the majority of topic words."""

    def __init__(self, seed: int = 0, n_classes: int = 2, n_words: int = 24, length: int = 8):
        rng = np.random.default_rng(seed)
        lexicon = make_lexicon(n_words * (n_classes + 1), rng)
        rng.shuffle(lexicon)
        self.families = [lexicon[i * n_words : (i + 1) * n_words] for i in range(n_classes)]
        self.filler = lexicon[n_classes * n_words :]
        self.n_classes = n_classes
        self.length = length
        self.rng = np.random.default_rng(seed + 1)

    def sample(self, count: int) -> tuple[list[np.ndarray], np.ndarray]:
        seqs, labels = [], np.empty(count, dtype=np.int64)
        for i in range(count):
            label = int(self.rng.integers(self.n_classes))
            words = []
            for _ in range(self.length):
                r = self.rng.random()
                if r < 0.35:
                    fam = self.families[label]
                elif r < 0.45:
                    other = [f for j, f in enumerate(self.families) if j != label]
                    fam = other[int(self.rng.integers(len(other)))]
                else:
                    fam = self.filler
                words.append(fam[int(self.rng.integers(len(fam)))])
            seqs.append(with_cls(encode(" ".join(words))))
            labels[i] = label
        return seqs, labels
