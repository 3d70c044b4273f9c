"""Stochastic decoding with a learned sample acceptor and Bayes-rule reranking.

Vanilla sampling draws one token per step straight from the model. Selective
sampling draws N candidate tokens per step and asks a small MLP (the sample
selector) to accept or reject each: among accepted samples one is chosen
uniformly at random; when all are rejected the highest-scored sample wins.
The acceptor probabilities of the chosen tokens double as the sequence prior
p(T), so candidates are reranked by log p(S|T) + sum log acceptor.

Candidate generation is batched over a shared source; every candidate owns an
RNG stream keyed by (seed, candidate index), so results do not depend on how
the batch is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import BOUNDARY_ID, Vocabulary
from .seq2seq import (
    Seq2SeqModel,
    bounded_ids,
    decode_step,
    encode,
    initial_state,
    sequence_logprob,
    step_batch,
)

LOG_FLOOR = np.log(1e-12)


# ---------------------------------------------------------------------------
# sample selector
# ---------------------------------------------------------------------------


@dataclass
class SelectorConfig:
    hidden: int = 16
    threshold: float = 0.5
    negatives: int = 4
    lr: float = 0.01
    epochs: int = 5
    batch: int = 256
    seed: int = 0


class SelectorModel:
    """MLP over 3 per-token features -> acceptance probability in (0, 1)."""

    N_FEATURES = 3

    def __init__(self, hidden: int = 16, threshold: float = 0.5, seed: int = 0):
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        r = 0.5
        self.w1 = ad.parameter(rng.uniform(-r, r, size=(self.N_FEATURES, hidden)), "sel.W1")
        self.b1 = ad.parameter(np.zeros(hidden), "sel.b1")
        self.w2 = ad.parameter(rng.uniform(-r, r, size=(hidden, 1)), "sel.W2")
        self.b2 = ad.parameter(np.zeros(1), "sel.b2")
        self.threshold = threshold
        self.feat_mean = np.zeros(self.N_FEATURES)
        self.feat_std = np.ones(self.N_FEATURES)

    def parameters(self) -> list[ad.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def _logits(self, feats: np.ndarray) -> ad.Tensor:
        x = ad.Tensor((feats - self.feat_mean) / self.feat_std)
        h = ad.tanh(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)

    def score(self, feats: np.ndarray) -> np.ndarray:
        """Acceptance probabilities for feature rows (B, 3) -> (B,)."""
        feats = np.atleast_2d(feats)
        with ad.no_grad():
            z = self._logits(feats).value[:, 0]
        return 1.0 / (1.0 + np.exp(-z))

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(
                f"sel-v1 {self.N_FEATURES} {self.w1.value.shape[1]} {self.threshold!r}\n".encode()
            )
            for arr in [self.feat_mean, self.feat_std] + [p.value for p in self.parameters()]:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "SelectorModel":
        with open(path, "rb") as fh:
            header = fh.readline().decode().split()
            if len(header) != 4 or header[0] != "sel-v1":
                raise ValueError(f"{path}: not a sel-v1 file")
            n_feat, hidden, threshold = int(header[1]), int(header[2]), float(header[3])
            if n_feat != cls.N_FEATURES:
                raise ValueError(f"{path}: unexpected feature count {n_feat}")
            model = cls(hidden=hidden, threshold=threshold)
            blocks = [model.feat_mean, model.feat_std] + [p.value for p in model.parameters()]
            for arr in blocks:
                buf = fh.read(arr.size * 8)
                arr[...] = np.frombuffer(buf, dtype="<f8").reshape(arr.shape)
        return model


def _floored_log(p: float) -> float:
    return max(float(np.log(p)), LOG_FLOOR) if p > 0 else LOG_FLOOR


def selector_features(dist: np.ndarray, token: int, lm_dist: np.ndarray) -> np.ndarray:
    """[log p(token|S); entropy of p(.|S); log p(token|null)], natural logs."""
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(dist > 0, dist * np.log(dist), 0.0)
    entropy = -plogp.sum()
    return np.array([_floored_log(dist[token]), entropy, _floored_log(lm_dist[token])])


def choose_slot(scores: np.ndarray, threshold: float, rng: np.random.Generator) -> int:
    """Pick among N sampled slots: uniformly at random among those whose
    selector score exceeds the threshold, else the highest-scored slot."""
    accepted = np.flatnonzero(scores > threshold)
    if accepted.size > 0:
        return int(accepted[int(rng.integers(accepted.size))])
    return int(np.argmax(scores))


def _features_for_slots(dist_row: np.ndarray, tokens: np.ndarray,
                        lm_row: np.ndarray) -> np.ndarray:
    """Vectorized selector_features for several sampled tokens of one step."""
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(dist_row > 0, dist_row * np.log(dist_row), 0.0)
    entropy = -plogp.sum()
    f1 = np.maximum(np.log(np.maximum(dist_row[tokens], 1e-300)), LOG_FLOOR)
    f3 = np.maximum(np.log(np.maximum(lm_row[tokens], 1e-300)), LOG_FLOOR)
    return np.stack([f1, np.full(len(tokens), entropy), f3], axis=1)


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------


@dataclass
class Candidate:
    """One sampled response. The end boundary, when reached, is the final
    token, so the per-step lists always align with ``tokens``."""

    tokens: list[int]
    step_logprobs: list[float]
    acceptor_probs: list[float]
    multiplicity: int = 1
    backward_score: float | None = None
    composite: float | None = None
    meta: dict = field(default_factory=dict)

    def words(self, vocab: Vocabulary) -> list[str]:
        return [vocab.word_of(t) for t in self.tokens if t != BOUNDARY_ID]

    @property
    def acceptor_logsum(self) -> float:
        return float(sum(np.log(max(p, 1e-300)) for p in self.acceptor_probs))


def _null_encode(model: Seq2SeqModel):
    return encode(model, bounded_ids(model.vocab, None))


def _tile_state(model, enc, n):
    state = initial_state(model, enc)
    return state.__class__(
        hs=[np.repeat(h, n, axis=0) for h in state.hs],
        cs=[np.repeat(c, n, axis=0) for c in state.cs],
        attn=np.repeat(state.attn, n, axis=0),
    )


def _generate(
    forward: Seq2SeqModel,
    lm: Seq2SeqModel | None,
    selector: SelectorModel | None,
    src: list[str],
    n: int,
    samples_per_step: int,
    max_len: int,
    topic: np.ndarray | None,
    seed: int,
    style_lm: Seq2SeqModel | None = None,
    lambda1: float = 1.0,
    lambda2: float = 0.5,
) -> list[Candidate]:
    """Core batched sampler; one RNG stream per candidate index."""
    if n < 1 or samples_per_step < 1:
        raise ValueError("need n >= 1 and samples_per_step >= 1")
    if selector is not None and lm is None:
        raise ValueError("selective sampling needs the unconditioned LM for features")

    vocab = forward.vocab
    enc_f = encode(forward, bounded_ids(vocab, src))
    state_f = _tile_state(forward, enc_f, n)
    if lm is not None:
        enc_l = _null_encode(lm)
        state_l = _tile_state(lm, enc_l, n)
    if style_lm is not None:
        from .scenting import multiply_mix  # local import: scenting builds on decoding

        enc_s = _null_encode(style_lm)
        state_s = _tile_state(style_lm, enc_s, n)

    seed_key = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    rngs = [np.random.default_rng([*seed_key, i]) for i in range(n)]
    topic_rows = None
    if topic is not None:
        topic_rows = np.broadcast_to(np.asarray(topic, dtype=np.float64),
                                     (n, len(topic)))
    cands = [Candidate(tokens=[], step_logprobs=[], acceptor_probs=[]) for _ in range(n)]
    prev = np.full(n, BOUNDARY_ID, dtype=np.intp)
    active = np.ones(n, dtype=bool)

    for _ in range(max_len):
        dist, state_f = step_batch(forward, state_f, prev, enc_f, topic_rows)
        if lm is not None:
            lm_dist, state_l = step_batch(lm, state_l, prev, enc_l)
        if style_lm is not None:
            style_dist, state_s = step_batch(style_lm, state_s, prev, enc_s)
            dist = np.stack(
                [
                    multiply_mix(dist[i], style_dist[i], lambda1, lambda2)
                    if active[i] else dist[i]
                    for i in range(n)
                ]
            )
        nxt = prev.copy()
        for i in range(n):
            if not active[i]:
                continue
            rng = rngs[i]
            row = dist[i]
            draws = rng.choice(len(row), size=samples_per_step, p=row)
            if selector is None:
                chosen_slot = 0
                acceptor = 1.0
            else:
                feats = _features_for_slots(row, draws, lm_dist[i])
                scores = selector.score(feats)
                chosen_slot = choose_slot(scores, selector.threshold, rng)
                acceptor = float(scores[chosen_slot])
            tok = int(draws[chosen_slot])
            cands[i].tokens.append(tok)
            cands[i].step_logprobs.append(float(np.log(max(row[tok], 1e-300))))
            cands[i].acceptor_probs.append(acceptor)
            nxt[i] = tok
            if tok == BOUNDARY_ID:
                active[i] = False
        prev = nxt
        if not active.any():
            break
    return cands


def selective_sample(
    forward: Seq2SeqModel,
    lm: Seq2SeqModel,
    selector: SelectorModel,
    src: list[str],
    samples_per_step: int = 10,
    max_len: int = 20,
    topic: np.ndarray | None = None,
    seed: int = 0,
    **kw,
) -> Candidate:
    """Draw one selectively-sampled response for ``src``."""
    return _generate(forward, lm, selector, src, 1, samples_per_step, max_len,
                     topic, seed, **kw)[0]


def vanilla_sample(
    forward: Seq2SeqModel,
    src: list[str],
    max_len: int = 20,
    topic: np.ndarray | None = None,
    seed: int = 0,
) -> Candidate:
    """One token drawn per step straight from the model distribution."""
    return _generate(forward, None, None, src, 1, 1, max_len, topic, seed)[0]


def generate_candidates(
    forward: Seq2SeqModel,
    lm: Seq2SeqModel | None,
    selector: SelectorModel | None,
    src: list[str],
    n: int = 500,
    samples_per_step: int = 10,
    max_len: int = 20,
    topic: np.ndarray | None = None,
    seed: int = 0,
    **kw,
) -> list[Candidate]:
    """n independent samples with duplicates collapsed (multiplicity kept)."""
    raw = _generate(forward, lm, selector, src, n, samples_per_step, max_len,
                    topic, seed, **kw)
    unique: dict[tuple, Candidate] = {}
    for cand in raw:
        key = tuple(cand.tokens)
        if key in unique:
            unique[key].multiplicity += 1
        else:
            unique[key] = cand
    return list(unique.values())


def rerank(candidates: list[Candidate], backward: Seq2SeqModel,
           src: list[str]) -> list[Candidate]:
    """Sort by log p(S|T) + sum log acceptor, descending; stable; no drops."""
    vocab = backward.vocab
    for cand in candidates:
        text = cand.words(vocab)
        cand.backward_score = sequence_logprob(backward, text or None, src)
        cand.composite = cand.backward_score + cand.acceptor_logsum
    return sorted(candidates, key=lambda c: -c.composite)


def greedy_decode(
    forward: Seq2SeqModel,
    src: list[str],
    max_len: int = 20,
    topic: np.ndarray | None = None,
) -> list[str]:
    """Argmax decoding; used by deterministic evaluations."""
    enc = encode(forward, bounded_ids(forward.vocab, src))
    state = initial_state(forward, enc)
    prev = BOUNDARY_ID
    out: list[str] = []
    for _ in range(max_len):
        probs, state = decode_step(forward, state, prev, enc, topic)
        prev = int(np.argmax(probs))
        if prev == BOUNDARY_ID:
            break
        out.append(forward.vocab.word_of(prev))
    return out


# ---------------------------------------------------------------------------
# selector training
# ---------------------------------------------------------------------------


def harvest_selector_data(
    forward: Seq2SeqModel,
    lm: Seq2SeqModel,
    data,
    negatives: int = 4,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced (features, label) pairs: the reference next token is a
    positive; sampled non-reference tokens are negatives."""
    vocab = forward.vocab
    rng = np.random.default_rng(seed)
    feats: list[np.ndarray] = []
    labels: list[float] = []
    for src, tgt in data.pairs:
        enc_f = encode(forward, bounded_ids(vocab, src))
        state_f = initial_state(forward, enc_f)
        enc_l = _null_encode(lm)
        state_l = initial_state(lm, enc_l)
        seq = vocab.encode(tgt) + [BOUNDARY_ID]
        prev = [BOUNDARY_ID] + seq[:-1]
        for p, ref in zip(prev, seq):
            dist, state_f = decode_step(forward, state_f, p, enc_f)
            lm_dist, state_l = decode_step(lm, state_l, p, enc_l)
            feats.append(selector_features(dist, ref, lm_dist))
            labels.append(1.0)
            draws = rng.choice(len(dist), size=4 * negatives, p=dist)
            negs = []
            for tok in draws:
                if tok != ref and tok not in negs:
                    negs.append(int(tok))
                if len(negs) == negatives:
                    break
            for tok in negs:
                feats.append(selector_features(dist, tok, lm_dist))
                labels.append(0.0)
    if not any(l == 0.0 for l in labels):
        raise ValueError("no negative examples harvestable from this data")
    return np.asarray(feats), np.asarray(labels)


def train_selector(
    forward: Seq2SeqModel,
    lm: Seq2SeqModel,
    data,
    config: SelectorConfig = SelectorConfig(),
    base: SelectorModel | None = None,
) -> SelectorModel:
    """Fit the acceptance MLP with logistic loss; ``base`` warm-starts weights."""
    feats, labels = harvest_selector_data(forward, lm, data,
                                          negatives=config.negatives,
                                          seed=config.seed)
    if base is None:
        model = SelectorModel(hidden=config.hidden, threshold=config.threshold,
                              seed=config.seed)
        model.feat_mean = feats.mean(axis=0)
        model.feat_std = np.maximum(feats.std(axis=0), 1e-6)
    else:
        model = SelectorModel(hidden=base.w1.value.shape[1], threshold=base.threshold)
        for mine, theirs in zip(base.parameters(), model.parameters()):
            theirs.value[...] = mine.value
        model.feat_mean = base.feat_mean.copy()
        model.feat_std = base.feat_std.copy()
    fit_selector(model, feats, labels, config)
    return model


def fit_selector(model: SelectorModel, feats: np.ndarray, labels: np.ndarray,
                 config: SelectorConfig) -> list[float]:
    opt = ad.Adam(model.parameters(), lr=config.lr, clip=5.0)
    rng = np.random.default_rng(config.seed)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(feats))
        total = 0.0
        for j in range(0, len(order), config.batch):
            idx = order[j : j + config.batch]
            z = model._logits(feats[idx])
            loss = ad.scale(
                ad.binary_cross_entropy_logits(z, labels[idx][:, None]),
                1.0 / len(idx),
            )
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += float(loss.value) * len(idx)
        losses.append(total / len(feats))
    return losses
