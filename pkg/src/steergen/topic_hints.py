"""Topic hints for the decoder: counting-grid posteriors from user text,
clicked grid cells, or TF-IDF-retrieved neighbor sentences.

The index is a small in-process inverted index with cosine TF-IDF ranking; it
plays the role of an external full-text search server while keeping tests
hermetic. Index and grid are immutable after construction, so concurrent
queries are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Vocabulary, to_bag
from .counting_grid import CGModel, posterior


@dataclass
class InvertedIndex:
    sentences: list[list[str]] = field(default_factory=list)
    postings: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    norms: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.sentences)

    def df(self, word: str) -> int:
        return len(self.postings.get(word, ()))

    def idf(self, word: str) -> float:
        d = self.df(word)
        return float(np.log(1.0 + len(self.sentences) / d)) if d else 0.0

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"idx-v1 {len(self.sentences)}\n")
            for sent in self.sentences:
                fh.write(" ".join(sent) + "\n")

    @classmethod
    def load(cls, path: str) -> "InvertedIndex":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2 or header[0] != "idx-v1":
                raise ValueError(f"{path}: not an idx-v1 file")
            n = int(header[1])
            sentences = [fh.readline().rstrip("\n").split() for _ in range(n)]
        return build_index(sentences)


def build_index(sentences: list[list[str]]) -> InvertedIndex:
    """TF-IDF inverted index over tokenized sentences (duplicates kept)."""
    index = InvertedIndex(sentences=[list(s) for s in sentences])
    for sid, sent in enumerate(index.sentences):
        tf: dict[str, int] = {}
        for tok in sent:
            tf[tok] = tf.get(tok, 0) + 1
        for tok, count in tf.items():
            index.postings.setdefault(tok, []).append((sid, count))
    norms = np.zeros(len(sentences))
    for word, plist in index.postings.items():
        idf = np.log(1.0 + len(sentences) / len(plist))
        for sid, tf_count in plist:
            norms[sid] += (tf_count * idf) ** 2
    index.norms = np.sqrt(norms)
    return index


def search(index: InvertedIndex, query: list[str], k: int = 10) -> list[tuple[int, float]]:
    """Cosine TF-IDF ranking, descending score, ties by sentence id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not index.sentences:
        return []
    qtf: dict[str, int] = {}
    for tok in query:
        qtf[tok] = qtf.get(tok, 0) + 1
    scores: dict[int, float] = {}
    qnorm_sq = 0.0
    for tok, count in qtf.items():
        idf = index.idf(tok)
        if idf == 0.0:
            continue
        qw = count * idf
        qnorm_sq += qw * qw
        for sid, tf_count in index.postings[tok]:
            scores[sid] = scores.get(sid, 0.0) + qw * tf_count * idf
    if not scores or qnorm_sq == 0.0:
        return []
    qnorm = np.sqrt(qnorm_sq)
    ranked = sorted(
        ((sid, s / (qnorm * index.norms[sid])) for sid, s in scores.items()),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]


# ---------------------------------------------------------------------------
# hint posteriors
# ---------------------------------------------------------------------------


def hint_posterior(cg: CGModel, vocab: Vocabulary, hint: list[str]) -> np.ndarray:
    """Location posterior of a hint sentence, flat row-major (length E_x*E_y).

    An empty hint falls back to the uniform posterior.
    """
    if not hint:
        n = cg.n_locations
        return np.full(n, 1.0 / n)
    return posterior(cg, to_bag(hint, vocab))


def cell_hint(cg: CGModel, cell: int | tuple[int, int], smoothing: int = 3) -> np.ndarray:
    """Mass spread uniformly over the smoothing x smoothing toroidal
    neighborhood centered at the clicked cell."""
    ex, ey = cg.extent
    if isinstance(cell, tuple):
        cx, cy = cell
    else:
        cx, cy = divmod(int(cell), ey)
    if not (0 <= cx < ex and 0 <= cy < ey):
        raise ValueError(f"cell ({cx}, {cy}) outside the {ex}x{ey} grid")
    if smoothing < 1:
        raise ValueError("smoothing width must be >= 1")
    grid = np.zeros((ex, ey))
    half = smoothing // 2
    for dx in range(-half, smoothing - half):
        for dy in range(-half, smoothing - half):
            grid[(cx + dx) % ex, (cy + dy) % ey] = 1.0
    flat = grid.reshape(-1)
    return flat / flat.sum()


def ir_hints(index: InvertedIndex, cg: CGModel, vocab: Vocabulary,
             src: list[str], k: int = 10) -> list[np.ndarray]:
    """One posterior per retrieved neighbor of the source, retrieval order."""
    hits = search(index, src, k=k)
    return [hint_posterior(cg, vocab, index.sentences[sid]) for sid, _ in hits]
