"""Ranking evaluation: MRR and P@1 over one-true-plus-19-distractor instances.

Ties are broken pessimistically against the true answer, so a constant scorer
earns the worst possible rank rather than an inflated one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import tokenize
from .seq2seq import sequence_logprob

N_CANDIDATES = 20

SCORERS = ("forward", "forward/lm", "backward")


@dataclass
class RankingInstance:
    source: list[str]
    true_target: list[str]
    distractors: list[list[str]]

    def __post_init__(self):
        if len(self.distractors) != N_CANDIDATES - 1:
            raise ValueError(
                f"expected {N_CANDIDATES - 1} distractors, got {len(self.distractors)}"
            )
        if any(d == self.true_target for d in self.distractors):
            raise ValueError("distractor equals the true target")


def mrr(ranks: list[int]) -> float:
    if not ranks:
        raise ValueError("mrr of an empty rank list")
    if any(r < 1 for r in ranks):
        raise ValueError("ranks start at 1")
    return float(np.mean([1.0 / r for r in ranks]))


def precision_at_1(ranks: list[int]) -> float:
    if not ranks:
        raise ValueError("precision of an empty rank list")
    return float(np.mean([1.0 if r == 1 else 0.0 for r in ranks]))


def rank_of_truth(true_score: float, distractor_scores: list[float]) -> int:
    """1 + number of distractors scoring >= the truth (pessimistic ties)."""
    return 1 + sum(1 for s in distractor_scores if s >= true_score)


def scorer_fn(name: str, models: dict):
    """Build a score(src, target) callable from the objective name."""
    if name not in SCORERS:
        raise ValueError(f"unknown scorer {name!r}; choose from {SCORERS}")
    needed = {"forward": ["forward"], "forward/lm": ["forward", "lm"],
              "backward": ["backward"]}[name]
    for key in needed:
        if models.get(key) is None:
            raise ValueError(f"scorer {name!r} needs the {key!r} model")
    if name == "forward":
        return lambda src, tgt: sequence_logprob(models["forward"], src, tgt)
    if name == "forward/lm":
        return lambda src, tgt: (
            sequence_logprob(models["forward"], src, tgt)
            - sequence_logprob(models["lm"], None, tgt)
        )
    return lambda src, tgt: sequence_logprob(models["backward"], tgt, src)


def ranking_eval_fn(score, instances: list[RankingInstance]) -> dict[str, float]:
    """Evaluate an arbitrary score(src, target) callable."""
    ranks = []
    for inst in instances:
        true_score = score(inst.source, inst.true_target)
        others = [score(inst.source, d) for d in inst.distractors]
        ranks.append(rank_of_truth(true_score, others))
    return {"mrr": mrr(ranks), "p_at_1": precision_at_1(ranks)}


def ranking_eval(scorer: str, models: dict,
                 instances: list[RankingInstance]) -> dict[str, float]:
    return ranking_eval_fn(scorer_fn(scorer, models), instances)


# ---------------------------------------------------------------------------
# instance construction and I/O
# ---------------------------------------------------------------------------


def make_instances(pairs: list[tuple[list[str], list[str]]], seed: int,
                   limit: int | None = None) -> list[RankingInstance]:
    """Build instances by sampling 19 distractor targets per pair from the
    other pairs; the seed is the only source of randomness."""
    rng = np.random.default_rng(seed)
    targets = [t for _, t in pairs]
    out = []
    for i, (src, true) in enumerate(pairs):
        if limit is not None and len(out) >= limit:
            break
        distractors = []
        guard = 0
        while len(distractors) < N_CANDIDATES - 1:
            j = int(rng.integers(len(targets)))
            cand = targets[j]
            if cand != true and cand not in distractors:
                distractors.append(list(cand))
            guard += 1
            if guard > 10_000:
                raise ValueError("not enough distinct targets for distractors")
        out.append(RankingInstance(source=list(src), true_target=list(true),
                                   distractors=distractors))
    return out


def save_instances(instances: list[RankingInstance], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            cells = [" ".join(inst.source), " ".join(inst.true_target)]
            cells += [" ".join(d) for d in inst.distractors]
            fh.write("\t".join(cells) + "\n")


def load_instances(path: str) -> list[RankingInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) != N_CANDIDATES + 1:
                raise ValueError(
                    f"{path}:{lineno}: expected {N_CANDIDATES + 1} columns, "
                    f"got {len(cells)}"
                )
            out.append(
                RankingInstance(
                    source=tokenize(cells[0]),
                    true_target=tokenize(cells[1]),
                    distractors=[tokenize(c) for c in cells[2:]],
                )
            )
    return out
