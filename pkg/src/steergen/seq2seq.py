"""Two-layer LSTM encoder-decoder with multiplicative attention.

One architecture serves three roles depending on the training pairs: the
forward model p(T|S), the backward model p(S|T) (sources and targets swapped),
and the unconditioned language model p(T|null) (sources empty). Sequences are
wrapped in the boundary symbol on both sides; an empty source becomes the
two-boundary sequence, which is how the null source is realized.

With ``topic_width > 0`` a topic vector (a flattened counting-grid posterior)
is concatenated to the word embedding at every decoder input step. An all-zero
topic vector contributes nothing, so unconditioned decoding remains available.

Parameter layout (also the block order in the ``s2s-v1`` model file): the
embedding table; per encoder layer W, U, b; per decoder layer W, U, b; the
attention matrix; the combiner; the output projection and bias. All matrices
act on row vectors (``x @ W``) and are stored little-endian float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import BOUNDARY_ID, PAD_ID, Vocabulary

NEG_INF = -1e30


@dataclass
class SeqConfig:
    d: int = 64
    m: int = 128
    layers: int = 2
    topic_width: int = 0
    init_range: float = 0.08
    seed: int = 0


@dataclass
class TrainConfig:
    lr: float = 0.002
    clip: float = 5.0
    batch: int = 50
    epochs: int = 10
    seed: int = 0


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    stopped_early: bool = False


@dataclass
class EncodedSource:
    """Encoder output: the context set plus per-layer final states."""

    keys: np.ndarray  # (T, m) or (B, T, m); one context vector per source token
    final_h: list[np.ndarray]
    final_c: list[np.ndarray]
    mask: np.ndarray | None = None  # additive attention mask, (B, T)


@dataclass
class DecoderState:
    hs: list[np.ndarray]  # per layer, (B, m)
    cs: list[np.ndarray]
    attn: np.ndarray  # last attentional state z, (B, m)
    alpha: np.ndarray | None = None  # attention weights of the last step


class Seq2SeqModel:
    def __init__(self, vocab: Vocabulary, config: SeqConfig, init: str = "random"):
        self.vocab = vocab
        self.config = config
        v, d, m, L = len(vocab), config.d, config.m, config.layers
        tw = config.topic_width
        rng = np.random.default_rng(config.seed)
        r = config.init_range

        def make(shape, name):
            if init == "random":
                val = rng.uniform(-r, r, size=shape)
            else:
                val = np.zeros(shape)
            return ad.parameter(val, name)

        self.emb = make((v, d), "emb")
        self.enc = []
        self.dec = []
        for l in range(L):
            enc_in = d if l == 0 else m
            dec_in = (d + tw) if l == 0 else m
            self.enc.append(
                (make((enc_in, 4 * m), f"enc{l}.W"), make((m, 4 * m), f"enc{l}.U"),
                 make(4 * m, f"enc{l}.b"))
            )
            self.dec.append(
                (make((dec_in, 4 * m), f"dec{l}.W"), make((m, 4 * m), f"dec{l}.U"),
                 make(4 * m, f"dec{l}.b"))
            )
        self.w_attn = make((m, m), "attn.W")
        self.w_comb = make((2 * m, m), "comb.W")
        self.w_out = make((m, v), "out.W")
        self.b_out = make(v, "out.b")

    def parameters(self) -> list[ad.Tensor]:
        out = [self.emb]
        for W, U, b in self.enc:
            out.extend([W, U, b])
        for W, U, b in self.dec:
            out.extend([W, U, b])
        out.extend([self.w_attn, self.w_comb, self.w_out, self.b_out])
        return out

    def clone(self) -> "Seq2SeqModel":
        twin = Seq2SeqModel(self.vocab, self.config, init="zeros")
        for mine, theirs in zip(self.parameters(), twin.parameters()):
            theirs.value[...] = mine.value
        return twin

    def check_finite(self) -> None:
        for p in self.parameters():
            if not np.all(np.isfinite(p.value)):
                raise FloatingPointError(f"non-finite values in parameter {p.name}")

    def save(self, path: str) -> None:
        c = self.config
        with open(path, "wb") as fh:
            fh.write(
                f"s2s-v1 {len(self.vocab)} {c.d} {c.m} {c.layers} {c.topic_width}\n".encode()
            )
            for p in self.parameters():
                fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str, vocab: Vocabulary) -> "Seq2SeqModel":
        with open(path, "rb") as fh:
            header = fh.readline().decode().split()
            if len(header) != 6 or header[0] != "s2s-v1":
                raise ValueError(f"{path}: not an s2s-v1 file")
            v, d, m, layers, tw = map(int, header[1:])
            if v != len(vocab):
                raise ValueError(
                    f"{path}: model vocab size {v} != supplied vocabulary {len(vocab)}"
                )
            model = cls(vocab, SeqConfig(d=d, m=m, layers=layers, topic_width=tw),
                        init="zeros")
            for p in model.parameters():
                buf = fh.read(p.value.size * 8)
                p.value[...] = np.frombuffer(buf, dtype="<f8").reshape(p.value.shape)
        return model


def bounded_ids(vocab: Vocabulary, tokens: list[str] | None) -> list[int]:
    """Token ids wrapped in the boundary symbol; None means the null source."""
    inner = vocab.encode(tokens) if tokens else []
    return [BOUNDARY_ID] + inner + [BOUNDARY_ID]


def _lstm_step(x, h, c, weights, m):
    W, U, b = weights
    gates = ad.add(ad.add(ad.matmul(x, W), ad.matmul(h, U)), b)
    i = ad.sigmoid(ad.slice_cols(gates, 0, m))
    f = ad.sigmoid(ad.slice_cols(gates, m, 2 * m))
    g = ad.tanh(ad.slice_cols(gates, 2 * m, 3 * m))
    o = ad.sigmoid(ad.slice_cols(gates, 3 * m, 4 * m))
    c2 = ad.add(ad.mul(f, c), ad.mul(i, g))
    h2 = ad.mul(o, ad.tanh(c2))
    return h2, c2


def _zeros(batch, m):
    return ad.Tensor(np.zeros((batch, m)))


def _encode_graph(model: Seq2SeqModel, src: np.ndarray):
    """src (B, T) int ids, all rows the same true length (no padding)."""
    B, T = src.shape
    m = model.config.m
    hs = [_zeros(B, m) for _ in model.enc]
    cs = [_zeros(B, m) for _ in model.enc]
    contexts = []
    for t in range(T):
        inp = ad.rows(model.emb, src[:, t])
        for l, weights in enumerate(model.enc):
            hs[l], cs[l] = _lstm_step(inp, hs[l], cs[l], weights, m)
            inp = hs[l]
        contexts.append(inp)
    keys = ad.stack_steps(contexts)
    return keys, hs, cs


def _decode_step_graph(model, x, hs, cs, keys, mask):
    """One decoder step from input x (B, d[+L]); returns logits and new state."""
    m = model.config.m
    inp = x
    new_hs, new_cs = list(hs), list(cs)
    for l, weights in enumerate(model.dec):
        new_hs[l], new_cs[l] = _lstm_step(inp, new_hs[l], new_cs[l], weights, m)
        inp = new_hs[l]
    hbar = inp
    scores = ad.attn_scores(ad.matmul(hbar, model.w_attn), keys)
    alpha = ad.softmax(scores, mask)
    context = ad.attn_context(alpha, keys)
    z = ad.tanh(ad.matmul(ad.concat_cols([context, hbar]), model.w_comb))
    logits = ad.add(ad.matmul(z, model.w_out), model.b_out)
    return logits, z, alpha, new_hs, new_cs


def _decoder_input(model, prev_ids: np.ndarray, topics: np.ndarray | None):
    x = ad.rows(model.emb, prev_ids)
    tw = model.config.topic_width
    if tw > 0:
        if topics is None:
            topics = np.zeros((len(prev_ids), tw))
        if topics.shape[-1] != tw:
            raise ValueError(
                f"topic vector length {topics.shape[-1]} != model topic width {tw}"
            )
        x = ad.concat_cols([x, ad.Tensor(topics)])
    elif topics is not None:
        raise ValueError("model has no topic input but a topic vector was supplied")
    return x


def _pair_loss_graph(model, src: np.ndarray, tgt_in: np.ndarray,
                     tgt_out: np.ndarray, weights: np.ndarray,
                     topics: np.ndarray | None):
    """Summed cross-entropy over one batch; sequences share source length."""
    keys, hs, cs = _encode_graph(model, src)
    terms = []
    for t in range(tgt_in.shape[1]):
        x = _decoder_input(model, tgt_in[:, t], topics)
        logits, _, _, hs, cs = _decode_step_graph(model, x, hs, cs, keys, None)
        terms.append(ad.cross_entropy(logits, tgt_out[:, t], weights[:, t]))
    return ad.add_n(terms)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def encode(model: Seq2SeqModel, src_ids: list[int]) -> EncodedSource:
    """Encode one boundary-padded source; returns one context vector per token."""
    batch = encode_batch(model, np.asarray([src_ids], dtype=np.intp))
    return EncodedSource(
        keys=batch.keys[0],
        final_h=[h[0] for h in batch.final_h],
        final_c=[c[0] for c in batch.final_c],
    )


def encode_batch(model: Seq2SeqModel, src: np.ndarray) -> EncodedSource:
    """Encode a batch of equal-length sources (B, T) without recording a graph."""
    if src.ndim != 2 or src.shape[1] == 0:
        raise ValueError("source must be a non-empty (B, T) id array")
    with ad.no_grad():
        keys, hs, cs = _encode_graph(model, src)
    return EncodedSource(
        keys=keys.value,
        final_h=[h.value for h in hs],
        final_c=[c.value for c in cs],
    )


def initial_state(model: Seq2SeqModel, enc: EncodedSource) -> DecoderState:
    hs = [np.atleast_2d(h) for h in enc.final_h]
    cs = [np.atleast_2d(c) for c in enc.final_c]
    return DecoderState(hs=hs, cs=cs, attn=np.zeros_like(hs[-1]))


def step_batch(
    model: Seq2SeqModel,
    state: DecoderState,
    prev_ids: np.ndarray,
    enc: EncodedSource,
    topics: np.ndarray | None = None,
) -> tuple[np.ndarray, DecoderState]:
    """Advance a batch of decoders one step; returns (probs (B, V), new state)."""
    keys = enc.keys if enc.keys.ndim == 3 else enc.keys[None, :, :]
    if keys.shape[0] == 1 and len(prev_ids) > 1:
        keys = np.broadcast_to(keys, (len(prev_ids),) + keys.shape[1:])
    with ad.no_grad():
        x = _decoder_input(model, np.asarray(prev_ids, dtype=np.intp), topics)
        hs = [ad.Tensor(h) for h in state.hs]
        cs = [ad.Tensor(c) for c in state.cs]
        logits, z, alpha, hs, cs = _decode_step_graph(
            model, x, hs, cs, ad.Tensor(keys), enc.mask
        )
        probs = ad.softmax(logits).value
    return probs, DecoderState(
        hs=[h.value for h in hs],
        cs=[c.value for c in cs],
        attn=z.value,
        alpha=alpha.value,
    )


def decode_step(
    model: Seq2SeqModel,
    state: DecoderState,
    prev_token: int,
    enc: EncodedSource,
    topic: np.ndarray | None = None,
) -> tuple[np.ndarray, DecoderState]:
    """Single-sequence decoder step; pure function of its inputs."""
    topics = None if topic is None else np.asarray(topic, dtype=np.float64)[None, :]
    probs, new_state = step_batch(
        model, state, np.asarray([prev_token], dtype=np.intp), enc, topics
    )
    return probs[0], new_state


def sequence_logprob(
    model: Seq2SeqModel,
    src: list[str] | None,
    tgt: list[str],
    topic: np.ndarray | None = None,
) -> float:
    """log p(tgt | src) summed over target tokens including the end boundary."""
    if not tgt:
        raise ValueError("target must be non-empty")
    src_ids = bounded_ids(model.vocab, src)
    tgt_ids = model.vocab.encode(tgt) + [BOUNDARY_ID]
    prev = [BOUNDARY_ID] + tgt_ids[:-1]
    enc = encode(model, src_ids)
    state = initial_state(model, enc)
    total = 0.0
    topic_row = None if topic is None else np.asarray(topic)[None, :]
    for p, y in zip(prev, tgt_ids):
        probs, state = step_batch(model, state, np.asarray([p], dtype=np.intp),
                                  enc, topic_row)
        total += math.log(max(probs[0, y], 1e-300))
    return total


def perplexity(model: Seq2SeqModel, pairs: list[tuple[list[str] | None, list[str]]],
               topics: list[np.ndarray] | None = None) -> float:
    """exp(-total log-probability / total target token count)."""
    if not pairs:
        raise ValueError("perplexity needs at least one pair")
    total_lp = 0.0
    total_tokens = 0
    for i, (src, tgt) in enumerate(pairs):
        topic = topics[i] if topics is not None else None
        total_lp += sequence_logprob(model, src, tgt, topic)
        total_tokens += len(tgt) + 1  # end boundary included
    return math.exp(-total_lp / total_tokens)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _batches(pairs_ids, config: TrainConfig, rng: np.random.Generator):
    """Deterministic batches of pairs sharing the same source length."""
    order = rng.permutation(len(pairs_ids))
    buckets: dict[int, list[int]] = {}
    for idx in order:
        buckets.setdefault(len(pairs_ids[idx][0]), []).append(int(idx))
    batches = []
    for length in sorted(buckets):
        ids = buckets[length]
        for j in range(0, len(ids), config.batch):
            batches.append(ids[j : j + config.batch])
    batch_order = rng.permutation(len(batches))
    return [batches[i] for i in batch_order]


def _batch_arrays(pairs_ids, idxs, topics):
    src = np.asarray([pairs_ids[i][0] for i in idxs], dtype=np.intp)
    tgts = [pairs_ids[i][1] for i in idxs]
    max_t = max(len(t) + 1 for t in tgts)  # + end boundary
    B = len(idxs)
    tgt_in = np.full((B, max_t), PAD_ID, dtype=np.intp)
    tgt_out = np.full((B, max_t), PAD_ID, dtype=np.intp)
    weights = np.zeros((B, max_t))
    for r, t in enumerate(tgts):
        seq = t + [BOUNDARY_ID]
        prev = [BOUNDARY_ID] + seq[:-1]
        tgt_in[r, : len(seq)] = prev
        tgt_out[r, : len(seq)] = seq
        weights[r, : len(seq)] = 1.0
    topic_rows = None
    if topics is not None:
        topic_rows = np.asarray([topics[i] for i in idxs])
    return src, tgt_in, tgt_out, weights, topic_rows


def train(
    model: Seq2SeqModel,
    data,
    config: TrainConfig,
    topics: list[np.ndarray] | None = None,
    epoch_hook=None,
    optimizer: ad.Adam | None = None,
) -> TrainReport:
    """Minimize target cross-entropy with ADAM under global-norm clipping.

    ``epoch_hook(epoch, model)`` runs after each epoch; returning True stops
    training early. Pass ``optimizer`` to continue from existing ADAM state.
    """
    if len(data.pairs) == 0:
        raise ValueError("training data is empty")
    vocab = model.vocab
    pairs_ids = [
        (bounded_ids(vocab, s), vocab.encode(t) + []) for s, t in data.pairs
    ]
    opt = optimizer or ad.Adam(model.parameters(), lr=config.lr, clip=config.clip)
    rng = np.random.default_rng(config.seed)
    report = TrainReport()

    for epoch in range(config.epochs):
        epoch_loss = 0.0
        epoch_tokens = 0
        for idxs in _batches(pairs_ids, config, rng):
            src, tgt_in, tgt_out, weights, topic_rows = _batch_arrays(
                pairs_ids, idxs, topics
            )
            n_tokens = weights.sum()
            loss = _pair_loss_graph(model, src, tgt_in, tgt_out,
                                    weights / n_tokens, topic_rows)
            if not np.isfinite(loss.value):
                raise FloatingPointError(
                    f"NaN/Inf loss at epoch {epoch}: lower the learning rate "
                    f"or check the data"
                )
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            report.grad_norms.append(opt.last_grad_norm)
            epoch_loss += float(loss.value) * n_tokens
            epoch_tokens += int(n_tokens)
        report.epoch_losses.append(epoch_loss / max(epoch_tokens, 1))
        model.check_finite()
        if epoch_hook is not None and epoch_hook(epoch, model):
            report.stopped_early = True
            break
    return report


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def gradient_check(
    model: Seq2SeqModel,
    pair: tuple[list[str], list[str]],
    topic: np.ndarray | None = None,
    eps: float = 1e-5,
) -> dict[str, float]:
    """Compare analytic gradients against central finite differences.

    Returns the max relative error per parameter block plus an ``__all__``
    entry. Intended for tiny models only; cost is two forward passes per
    parameter entry.
    """
    vocab = model.vocab
    src, tgt = pair
    src_arr = np.asarray([bounded_ids(vocab, src)], dtype=np.intp)
    seq = vocab.encode(tgt) + [BOUNDARY_ID]
    tgt_in = np.asarray([[BOUNDARY_ID] + seq[:-1]], dtype=np.intp)
    tgt_out = np.asarray([seq], dtype=np.intp)
    weights = np.ones((1, len(seq)))
    topic_rows = None if topic is None else np.asarray(topic)[None, :]

    def loss_value() -> float:
        with ad.no_grad():
            return float(
                _pair_loss_graph(model, src_arr, tgt_in, tgt_out, weights,
                                 topic_rows).value
            )

    for p in model.parameters():
        p.grad = None
    loss = _pair_loss_graph(model, src_arr, tgt_in, tgt_out, weights, topic_rows)
    ad.backward(loss)

    errors: dict[str, float] = {}
    worst = 0.0
    for p in model.parameters():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        block_err = 0.0
        flat = p.value.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_value()
            flat[i] = orig - eps
            lo = loss_value()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-4)
            block_err = max(block_err, abs(a_flat[i] - numeric) / denom)
        errors[p.name] = block_err
        worst = max(worst, block_err)
    errors["__all__"] = worst
    return errors
