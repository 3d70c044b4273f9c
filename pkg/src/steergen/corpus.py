"""Text ingestion: tokenization, vocabulary, id sequences, and bags of words.

All objects here are immutable after construction and safe to share across
threads. The tokenizer is a small deterministic rule set: lowercase, split on
whitespace, detach terminal punctuation, keep apostrophe contractions intact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

BOUNDARY = "<s>"
UNK = "<unk>"
PAD = "<pad>"

# Reserved ids are fixed so serialized models stay compatible across vocabs.
PAD_ID = 0
BOUNDARY_ID = 1
UNK_ID = 2
RESERVED = (PAD, BOUNDARY, UNK)

_TERMINAL_PUNCT = ".,!?;:"
_STRIP_CHARS = "".join(chr(c) for c in range(32))


def tokenize(text: str) -> list[str]:
    """Lowercase and split ``text`` into tokens.

    Terminal punctuation (``. , ! ? ; :``) is detached as separate tokens;
    apostrophe-internal contractions (``i'm``, ``don't``) stay attached.
    Empty input yields an empty list.
    """
    tokens: list[str] = []
    for chunk in text.lower().split():
        chunk = chunk.strip(_STRIP_CHARS)
        if not chunk:
            continue
        trailing: list[str] = []
        while chunk and chunk[-1] in _TERMINAL_PUNCT:
            trailing.append(chunk[-1])
            chunk = chunk[:-1]
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(trailing))
    return tokens


class Vocabulary:
    """Dense word<->id mapping with reserved pad/boundary/unknown symbols."""

    def __init__(self, words: list[str]):
        for i, sym in enumerate(RESERVED):
            if words[i] != sym:
                raise ValueError(f"word {i} must be the reserved symbol {sym!r}")
        self._words = list(words)
        self._ids = {w: i for i, w in enumerate(self._words)}
        if len(self._ids) != len(self._words):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def word_of(self, idx: int) -> str:
        return self._words[idx]

    @property
    def words(self) -> list[str]:
        return list(self._words)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self._words[i] for i in ids]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"vocab-v1 {len(self._words)}\n")
            for w in self._words:
                fh.write(w + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2 or header[0] != "vocab-v1":
                raise ValueError(f"{path}: not a vocab-v1 file")
            size = int(header[1])
            words = [fh.readline().rstrip("\n") for _ in range(size)]
        return cls(words)


def build_vocab(sentences: list[list[str]], cap: int = 50_000) -> Vocabulary:
    """Build a vocabulary of the ``cap`` most frequent words plus reserved symbols.

    Frequency ties are broken by first occurrence order, so the result is
    deterministic for a fixed sentence order.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    n = 0
    for sent in sentences:
        for tok in sent:
            counts[tok] = counts.get(tok, 0) + 1
            if tok not in first_seen:
                first_seen[tok] = n
                n += 1
    ranked = sorted(counts, key=lambda w: (-counts[w], first_seen[w]))
    kept = [w for w in ranked if w not in RESERVED][:cap]
    return Vocabulary(list(RESERVED) + kept)


@dataclass(frozen=True)
class Bag:
    """Multiset of word ids. ``counts`` maps id -> positive count."""

    counts: dict[int, int]
    total: int

    def __post_init__(self):
        if any(c < 1 for c in self.counts.values()):
            raise ValueError("bag counts must be >= 1")
        if self.total != sum(self.counts.values()):
            raise ValueError("bag total inconsistent with counts")


def to_bag(tokens: list[str], vocab: Vocabulary) -> Bag:
    counts: dict[int, int] = {}
    for tok in tokens:
        idx = vocab.id_of(tok)
        counts[idx] = counts.get(idx, 0) + 1
    return Bag(counts=counts, total=len(tokens))


@dataclass
class PairDataset:
    """Parallel (source, target) token sequences.

    For monologue corpora, ``documents`` holds the original sentence groups
    and each consecutive in-document sentence pair also appears in ``pairs``
    as a (previous, current) link.
    """

    pairs: list[tuple[list[str], list[str]]] = field(default_factory=list)
    documents: list[list[list[str]]] | None = None

    def __len__(self) -> int:
        return len(self.pairs)

    def sentences(self) -> list[list[str]]:
        """All monologue sentences in document order (empty if pair-format)."""
        if self.documents is None:
            return []
        return [s for doc in self.documents for s in doc]


def load_pairs(path: str, format: str = "pairs") -> PairDataset:
    """Load a dataset from disk.

    ``pairs`` format: one ``source<TAB>target`` per line.
    ``monologue`` format: one sentence per line, blank line separates documents;
    consecutive sentences within a document become (previous, current) pairs.
    """
    if format not in ("pairs", "monologue"):
        raise ValueError(f"unknown format {format!r}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    if format == "pairs":
        pairs = []
        for lineno, line in enumerate(lines, start=1):
            cells = line.split("\t")
            if len(cells) != 2:
                raise ValueError(
                    f"{path}:{lineno}: expected exactly one TAB, got {len(cells) - 1}"
                )
            src, tgt = tokenize(cells[0]), tokenize(cells[1])
            if not tgt:
                raise ValueError(f"{path}:{lineno}: empty target")
            pairs.append((src, tgt))
        return PairDataset(pairs=pairs)

    documents: list[list[list[str]]] = []
    current: list[list[str]] = []
    for line in lines:
        if not line.strip():
            if current:
                documents.append(current)
                current = []
            continue
        sent = tokenize(line)
        if sent:
            current.append(sent)
    if current:
        documents.append(current)
    pairs = []
    for doc in documents:
        for prev, cur in zip(doc, doc[1:]):
            pairs.append((prev, cur))
    return PairDataset(pairs=pairs, documents=documents)
