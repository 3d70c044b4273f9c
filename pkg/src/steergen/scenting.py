"""Style restriction over a base conversation model.

Three methods, each usable on its own:

* rank: answer with the best sentence from the persona's own corpus, sorted
  by the backward model p(S|T) (their p(T) is constant: the sentences are
  naturally occurring).
* multiply: mix the base per-step distribution with a styled language model,
  p1^lambda1 * p2^lambda2, renormalized before sampling.
* finetune: continue training the base model on (pseudo context, styled
  sentence) pairs, stopping when styled validation perplexity starts rising.

A persona directory bundles the scenting corpus, the styled LM, and the
optional finetuned model/selector plus mixing weights.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .corpus import PairDataset, load_pairs
from .decoding import (
    Candidate,
    SelectorConfig,
    SelectorModel,
    generate_candidates,
    train_selector,
)
from .seq2seq import Seq2SeqModel, TrainConfig, perplexity, sequence_logprob, train

DIST_FLOOR = 1e-12


@dataclass
class PersonaBundle:
    name: str
    corpus: PairDataset
    style_lm: Seq2SeqModel | None = None
    finetuned: Seq2SeqModel | None = None
    styled_selector: SelectorModel | None = None
    lambda1: float = 1.0
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("mixing weights must be non-negative")
        if not self.sentences() and self.style_lm is None and self.finetuned is None:
            raise ValueError("persona offers no scenting method")

    def sentences(self) -> list[list[str]]:
        return self.corpus.sentences() if self.corpus is not None else []

    def methods(self) -> list[str]:
        out = []
        if self.sentences():
            out.append("rank")
        if self.style_lm is not None:
            out.append("multiply")
        if self.finetuned is not None:
            out.append("finetune")
        return out


def rank_retrieve(
    src: list[str],
    persona: PersonaBundle,
    backward: Seq2SeqModel,
    k: int = 10,
) -> list[tuple[list[str], float]]:
    """Top-k persona sentences by p(S|T); stable tie-break by corpus order."""
    if k <= 0:
        raise ValueError("k must be positive")
    sentences = persona.sentences()
    if not sentences:
        raise ValueError(f"persona {persona.name!r} has an empty corpus")
    scored = [
        (i, sent, sequence_logprob(backward, sent, src))
        for i, sent in enumerate(sentences)
    ]
    scored.sort(key=lambda item: (-item[2], item[0]))
    return [(sent, score) for _, sent, score in scored[:k]]


def multiply_mix(base_dist: np.ndarray, style_dist: np.ndarray,
                 lambda1: float = 1.0, lambda2: float = 0.5) -> np.ndarray:
    """Renormalized pointwise product p1^l1 * p2^l2, floored at 1e-12."""
    if base_dist.shape != style_dist.shape:
        raise ValueError("distributions must share a vocabulary")
    logq = (
        lambda1 * np.log(np.maximum(base_dist, DIST_FLOOR))
        + lambda2 * np.log(np.maximum(style_dist, DIST_FLOOR))
    )
    logq -= logq.max()
    q = np.exp(logq)
    z = q.sum()
    if not np.isfinite(z) or z <= 0.0:
        raise ValueError("mixed distribution has no support (disjoint models)")
    return q / z


# ---------------------------------------------------------------------------
# pseudo contexts and finetuning
# ---------------------------------------------------------------------------


def _generation_score(cand: Candidate) -> float:
    return float(sum(cand.step_logprobs)) + cand.acceptor_logsum


def best_pseudo_context(
    backward: Seq2SeqModel,
    lm: Seq2SeqModel,
    selector: SelectorModel,
    styled_sentence: list[str],
    seed,
    n_candidates: int = 16,
    samples_per_step: int = 10,
    max_len: int = 20,
) -> list[str]:
    """Top generated source for a styled sentence under the backward model."""
    cands = generate_candidates(
        backward, lm, selector, styled_sentence,
        n=n_candidates, samples_per_step=samples_per_step,
        max_len=max_len, seed=seed,
    )
    best = max(cands, key=_generation_score)
    return best.words(backward.vocab)


def build_pseudo_pairs(
    styled_corpus: PairDataset,
    backward: Seq2SeqModel,
    selector: SelectorModel,
    lm: Seq2SeqModel,
    seed: int = 0,
    n_candidates: int = 16,
    samples_per_step: int = 10,
    max_len: int = 20,
) -> PairDataset:
    """(pseudo context, sentence) for every styled sentence, plus
    (previous sentence, sentence) inside each document."""
    if styled_corpus.documents is None:
        raise ValueError("styled corpus must be monologue-format (documents)")
    pairs = []
    counter = 0
    for doc in styled_corpus.documents:
        for j, sentence in enumerate(doc):
            pseudo = best_pseudo_context(
                backward, lm, selector, sentence, seed=(seed, counter),
                n_candidates=n_candidates, samples_per_step=samples_per_step,
                max_len=max_len,
            )
            pairs.append((pseudo, list(sentence)))
            if j > 0:
                pairs.append((list(doc[j - 1]), list(sentence)))
            counter += 1
    return PairDataset(pairs=pairs)


def early_stop_index(val_perplexities: list[float]) -> int:
    """Checkpoint to keep: the epoch before the first perplexity increase,
    or the final epoch of a monotone-improving run."""
    for i in range(1, len(val_perplexities)):
        if val_perplexities[i] > val_perplexities[i - 1]:
            return i - 1
    return len(val_perplexities) - 1


@dataclass
class FinetuneConfig:
    lr: float = 0.002
    clip: float = 5.0
    batch: int = 50
    max_epochs: int = 10
    seed: int = 0
    selector: SelectorConfig = field(default_factory=SelectorConfig)


@dataclass
class FinetuneReport:
    val_perplexities: list[float]
    kept_epoch: int  # 1-based


def styled_val_perplexity(model: Seq2SeqModel, val_sentences: list[list[str]]) -> float:
    """Null-source perplexity of the styled validation sentences."""
    return perplexity(model, [(None, s) for s in val_sentences])


def finetune(
    base_model: Seq2SeqModel,
    base_selector: SelectorModel | None,
    pairs: PairDataset,
    val: PairDataset,
    config: FinetuneConfig = FinetuneConfig(),
    lm: Seq2SeqModel | None = None,
) -> tuple[Seq2SeqModel, SelectorModel | None, FinetuneReport]:
    """Continue ADAM training from the base parameters with early stopping on
    styled validation perplexity; the styled selector warm-starts from the
    base selector when the LM needed for its features is supplied."""
    val_sentences = val.sentences() or [t for _, t in val.pairs]
    if not val_sentences:
        raise ValueError("validation set is empty")
    model = base_model.clone()
    checkpoints: list[Seq2SeqModel] = []
    ppls: list[float] = []

    def hook(epoch: int, current: Seq2SeqModel) -> bool:
        ppls.append(styled_val_perplexity(current, val_sentences))
        checkpoints.append(current.clone())
        return len(ppls) >= 2 and ppls[-1] > ppls[-2]

    train(
        model, pairs,
        TrainConfig(lr=config.lr, clip=config.clip, batch=config.batch,
                    epochs=config.max_epochs, seed=config.seed),
        epoch_hook=hook,
    )
    keep = early_stop_index(ppls)
    styled = checkpoints[keep]
    styled_selector = base_selector
    if base_selector is not None and lm is not None:
        styled_selector = train_selector(styled, lm, pairs, config.selector,
                                         base=base_selector)
    return styled, styled_selector, FinetuneReport(val_perplexities=ppls,
                                                   kept_epoch=keep + 1)


# ---------------------------------------------------------------------------
# persona directories
# ---------------------------------------------------------------------------


def save_persona(bundle: PersonaBundle, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "corpus.txt"), "w", encoding="utf-8") as fh:
        docs = bundle.corpus.documents or [[t for _, t in bundle.corpus.pairs]]
        for i, doc in enumerate(docs):
            if i:
                fh.write("\n")
            for sent in doc:
                fh.write(" ".join(sent) + "\n")
    if bundle.style_lm is not None:
        bundle.style_lm.save(os.path.join(directory, "lm.model"))
    if bundle.finetuned is not None:
        bundle.finetuned.save(os.path.join(directory, "finetuned.model"))
    if bundle.styled_selector is not None:
        bundle.styled_selector.save(os.path.join(directory, "selector.model"))
    meta = {"name": bundle.name, "lambda1": bundle.lambda1, "lambda2": bundle.lambda2}
    with open(os.path.join(directory, "meta"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_persona(directory: str, vocab) -> PersonaBundle:
    with open(os.path.join(directory, "meta"), encoding="utf-8") as fh:
        meta = json.load(fh)
    corpus = load_pairs(os.path.join(directory, "corpus.txt"), format="monologue")

    def opt(path, loader):
        full = os.path.join(directory, path)
        return loader(full) if os.path.exists(full) else None

    return PersonaBundle(
        name=meta["name"],
        corpus=corpus,
        style_lm=opt("lm.model", lambda p: Seq2SeqModel.load(p, vocab)),
        finetuned=opt("finetuned.model", lambda p: Seq2SeqModel.load(p, vocab)),
        styled_selector=opt("selector.model", SelectorModel.load),
        lambda1=float(meta.get("lambda1", 1.0)),
        lambda2=float(meta.get("lambda2", 0.5)),
    )
