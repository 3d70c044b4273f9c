"""Command-line entry points.

Every command that trains or decodes takes an explicit ``--seed`` and is
bit-reproducible: identical invocations write identical bytes.
"""

from __future__ import annotations

import os
import sys

import click
import numpy as np

from . import counting_grid as cgrid
from .corpus import PairDataset, Vocabulary, build_vocab, load_pairs, to_bag, tokenize
from .decoding import (
    SelectorConfig,
    SelectorModel,
    generate_candidates,
    rerank,
    train_selector,
)
from .eval import load_instances, ranking_eval
from .scenting import (
    FinetuneConfig,
    build_pseudo_pairs,
    finetune,
    load_persona,
    rank_retrieve,
)
from .seq2seq import SeqConfig, Seq2SeqModel, TrainConfig, gradient_check, perplexity, train
from .topic_hints import InvertedIndex, build_index, cell_hint, hint_posterior, search


def _parse_extent(text: str) -> tuple[int, int]:
    try:
        x, y = text.lower().split("x")
        return int(x), int(y)
    except ValueError:
        raise click.BadParameter(f"expected WIDTHxHEIGHT, got {text!r}")


def _read_lines(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def _model_with_vocab(model_path: str, vocab_path: str):
    vocab = Vocabulary.load(vocab_path)
    return Seq2SeqModel.load(model_path, vocab), vocab


@click.group()
def main():
    """Persona-styled, topic-steered response generation toolkit."""


# ---------------------------------------------------------------------------
# cg
# ---------------------------------------------------------------------------


@main.group()
def cg():
    """Counting-grid topic model."""


@cg.command("train")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True),
              help="UTF-8 text, one document per line")
@click.option("--grid", default="16x16", show_default=True)
@click.option("--window", default="3x3", show_default=True)
@click.option("--iters", default=50, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--vocab", "vocab_path", type=click.Path(exists=True),
              help="existing vocabulary; default: build from the input")
@click.option("--vocab-cap", default=50_000, show_default=True)
def cg_train(input_path, grid, window, iters, seed, out, vocab_path, vocab_cap):
    """Fit a counting grid on bags of words from a text file."""
    lines = [tokenize(line) for line in _read_lines(input_path)]
    if vocab_path:
        vocab = Vocabulary.load(vocab_path)
    else:
        vocab = build_vocab(lines, cap=vocab_cap)
        vocab.save(out + ".vocab")
    bags = [to_bag(tokens, vocab) for tokens in lines if tokens]
    config = cgrid.CGConfig(grid=_parse_extent(grid), window=_parse_extent(window),
                            iterations=iters, seed=seed)
    model, trace = cgrid.em_fit(bags, config, len(vocab))
    model.save(out)
    click.echo(f"trained on {len(bags)} bags; "
               f"loglik {trace[0]:.4f} -> {trace[-1]:.4f}" if trace else
               f"initialized model on {len(bags)} bags")


@cg.command("show")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--topk", default=3, show_default=True)
@click.option("--vocab", "vocab_path", type=click.Path(),
              help="default: MODEL.vocab")
def cg_show(model_path, topk, vocab_path):
    """Render the grid as rows of top words per cell."""
    model = cgrid.CGModel.load(model_path)
    vocab = Vocabulary.load(vocab_path or model_path + ".vocab")
    ex, ey = model.extent
    cells = [
        "/".join(vocab.word_of(w) for w, _ in cgrid.top_words(model, loc, topk))
        for loc in range(ex * ey)
    ]
    width = max(len(c) for c in cells) + 2
    for x in range(ex):
        row = cells[x * ey : (x + 1) * ey]
        click.echo("".join(c.ljust(width) for c in row).rstrip())


# ---------------------------------------------------------------------------
# s2s
# ---------------------------------------------------------------------------


@main.group()
def s2s():
    """Sequence-to-sequence models."""


@s2s.command("train")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--dir", "out_dir", required=True, type=click.Path())
@click.option("--role", type=click.Choice(["forward", "backward", "lm"]),
              default="forward", show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--d", default=64, show_default=True, help="embedding size")
@click.option("--m", default=128, show_default=True, help="LSTM memory size")
@click.option("--layers", default=2, show_default=True)
@click.option("--epochs", default=10, show_default=True)
@click.option("--batch", default=50, show_default=True)
@click.option("--lr", default=0.002, show_default=True)
@click.option("--clip", default=5.0, show_default=True)
@click.option("--topic-width", default=0, show_default=True,
              help="condition the decoder on a counting-grid posterior")
@click.option("--cg", "cg_path", type=click.Path(exists=True),
              help="counting grid supplying training topic vectors")
@click.option("--vocab-cap", default=50_000, show_default=True)
@click.option("--out-name", help="model file name; default derived from the role")
def s2s_train(pairs_path, out_dir, role, seed, d, m, layers, epochs, batch, lr,
              clip, topic_width, cg_path, vocab_cap, out_name):
    """Train a forward/backward/LM model; models in one dir share vocab.txt."""
    data = load_pairs(pairs_path, format="pairs")
    os.makedirs(out_dir, exist_ok=True)
    vocab_file = os.path.join(out_dir, "vocab.txt")
    if os.path.exists(vocab_file):
        vocab = Vocabulary.load(vocab_file)
    else:
        sentences = [s for s, _ in data.pairs] + [t for _, t in data.pairs]
        vocab = build_vocab(sentences, cap=vocab_cap)
        vocab.save(vocab_file)

    if role == "backward":
        data = PairDataset(pairs=[(t, s) for s, t in data.pairs])
    elif role == "lm":
        data = PairDataset(pairs=[([], t) for _, t in data.pairs])

    topics = None
    if topic_width > 0:
        if not cg_path:
            raise click.UsageError("--topic-width needs --cg")
        grid = cgrid.CGModel.load(cg_path)
        if grid.n_locations != topic_width:
            raise click.UsageError(
                f"--topic-width {topic_width} != grid size {grid.n_locations}")
        topics = [cgrid.posterior(grid, to_bag(t, vocab)) for _, t in data.pairs]

    model = Seq2SeqModel(vocab, SeqConfig(d=d, m=m, layers=layers,
                                          topic_width=topic_width, seed=seed))
    report = train(model, data,
                   TrainConfig(lr=lr, clip=clip, batch=batch, epochs=epochs, seed=seed),
                   topics=topics)
    name = out_name or ("topic.model" if topic_width > 0 and role == "forward"
                        else f"{role}.model")
    model.save(os.path.join(out_dir, name))
    click.echo(f"{name}: loss {report.epoch_losses[0]:.4f} -> "
               f"{report.epoch_losses[-1]:.4f}; "
               f"max grad norm {max(report.grad_norms):.4f}")


@s2s.command("train-selector")
@click.option("--dir", "model_dir", required=True, type=click.Path(exists=True),
              help="dir with vocab.txt, forward.model, lm.model")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--epochs", default=5, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--threshold", default=0.5, show_default=True)
def s2s_train_selector(model_dir, pairs_path, epochs, seed, threshold):
    """Train the sample acceptor from a trained forward model and LM."""
    vocab = Vocabulary.load(os.path.join(model_dir, "vocab.txt"))
    forward = Seq2SeqModel.load(os.path.join(model_dir, "forward.model"), vocab)
    lm = Seq2SeqModel.load(os.path.join(model_dir, "lm.model"), vocab)
    data = load_pairs(pairs_path, format="pairs")
    selector = train_selector(forward, lm, data,
                              SelectorConfig(epochs=epochs, seed=seed,
                                             threshold=threshold))
    selector.save(os.path.join(model_dir, "selector.model"))
    click.echo("selector.model written")


@s2s.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
def s2s_eval(model_path, pairs_path, vocab_path):
    """Print perplexity of a model on a pairs file."""
    model, _ = _model_with_vocab(model_path, vocab_path)
    data = load_pairs(pairs_path, format="pairs")
    click.echo(f"{perplexity(model, data.pairs):.6f}")


@s2s.command("gradcheck")
@click.option("--vocab-size", default=12, show_default=True)
@click.option("--d", default=4, show_default=True)
@click.option("--m", default=6, show_default=True)
@click.option("--seeds", default=20, show_default=True)
@click.option("--tolerance", default=1e-4, show_default=True)
def s2s_gradcheck(vocab_size, d, m, seeds, tolerance):
    """Check analytic gradients against central finite differences."""
    from .corpus import RESERVED

    words = [f"w{i}" for i in range(vocab_size - len(RESERVED))]
    vocab = Vocabulary(list(RESERVED) + words)
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        model = Seq2SeqModel(vocab, SeqConfig(d=d, m=m, layers=2, seed=seed))
        src = [words[int(i)] for i in rng.integers(0, len(words), size=2)]
        tgt = [words[int(i)] for i in rng.integers(0, len(words), size=3)]
        errors = gradient_check(model, (src, tgt))
        worst = max(worst, errors["__all__"])
        click.echo(f"seed {seed}: max rel err {errors['__all__']:.3e}")
    click.echo(f"overall max rel err {worst:.3e}")
    if worst >= tolerance:
        click.echo(f"FAIL: exceeded {tolerance:g}", err=True)
        sys.exit(1)


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------


@main.command("decode")
@click.option("--forward", "forward_path", required=True, type=click.Path(exists=True))
@click.option("--backward", "backward_path", required=True, type=click.Path(exists=True))
@click.option("--lm", "lm_path", type=click.Path(exists=True))
@click.option("--selector", "selector_path", type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--src", required=True)
@click.option("--n", default=500, show_default=True)
@click.option("--topn", default=10, show_default=True)
@click.option("--samples-per-step", default=10, show_default=True)
@click.option("--max-len", default=20, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--vanilla", is_flag=True, help="bypass the selector (N=1)")
@click.option("--topic-from-hint", help="hint text mapped to a CG posterior")
@click.option("--cg", "cg_path", type=click.Path(exists=True))
def decode_cmd(forward_path, backward_path, lm_path, selector_path, vocab_path,
               src, n, topn, samples_per_step, max_len, seed, vanilla,
               topic_from_hint, cg_path):
    """Generate, rerank, and print the top candidates as TSV."""
    vocab = Vocabulary.load(vocab_path)
    forward = Seq2SeqModel.load(forward_path, vocab)
    backward = Seq2SeqModel.load(backward_path, vocab)
    lm = Seq2SeqModel.load(lm_path, vocab) if lm_path else None
    selector = SelectorModel.load(selector_path) if selector_path else None
    if not vanilla and (lm is None or selector is None):
        raise click.UsageError("selective sampling needs --lm and --selector "
                               "(or pass --vanilla)")
    topic = None
    if topic_from_hint is not None:
        if not cg_path:
            raise click.UsageError("--topic-from-hint needs --cg")
        grid = cgrid.CGModel.load(cg_path)
        topic = hint_posterior(grid, vocab, tokenize(topic_from_hint))
    src_tokens = tokenize(src)
    cands = generate_candidates(
        forward, None if vanilla else lm, None if vanilla else selector,
        src_tokens, n=n, samples_per_step=1 if vanilla else samples_per_step,
        max_len=max_len, topic=topic, seed=seed,
    )
    ranked = rerank(cands, backward, src_tokens)
    click.echo("rank\ttext\tcomposite\tbackward\tacceptor\tmultiplicity")
    for i, cand in enumerate(ranked[:topn], start=1):
        text = " ".join(cand.words(vocab))
        click.echo(f"{i}\t{text}\t{cand.composite:.6f}\t{cand.backward_score:.6f}"
                   f"\t{cand.acceptor_logsum:.6f}\t{cand.multiplicity}")


# ---------------------------------------------------------------------------
# scent
# ---------------------------------------------------------------------------


@main.group()
def scent():
    """Style restriction: rank / multiply / finetune."""


@scent.command("rank")
@click.option("--persona", "persona_dir", required=True, type=click.Path(exists=True))
@click.option("--src", required=True)
@click.option("-k", default=10, show_default=True)
@click.option("--backward", "backward_path", required=True, type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
def scent_rank(persona_dir, src, k, backward_path, vocab_path):
    """Rank the persona corpus against a prompt with the backward model."""
    backward, vocab = _model_with_vocab(backward_path, vocab_path)
    persona = load_persona(persona_dir, vocab)
    for sent, score in rank_retrieve(tokenize(src), persona, backward, k=k):
        click.echo(f"{' '.join(sent)}\t{score:.6f}")


@scent.command("multiply")
@click.option("--persona", "persona_dir", required=True, type=click.Path(exists=True))
@click.option("--forward", "forward_path", required=True, type=click.Path(exists=True))
@click.option("--backward", "backward_path", required=True, type=click.Path(exists=True))
@click.option("--lm", "lm_path", required=True, type=click.Path(exists=True))
@click.option("--selector", "selector_path", required=True, type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--src", required=True)
@click.option("--lambda1", type=float, help="override the persona default")
@click.option("--lambda2", type=float, help="override the persona default")
@click.option("--n", default=100, show_default=True)
@click.option("--topn", default=10, show_default=True)
@click.option("--seed", default=7, show_default=True)
def scent_multiply(persona_dir, forward_path, backward_path, lm_path,
                   selector_path, vocab_path, src, lambda1, lambda2, n, topn, seed):
    """Decode with the persona LM mixed into every step distribution."""
    vocab = Vocabulary.load(vocab_path)
    forward = Seq2SeqModel.load(forward_path, vocab)
    backward = Seq2SeqModel.load(backward_path, vocab)
    lm = Seq2SeqModel.load(lm_path, vocab)
    selector = SelectorModel.load(selector_path)
    persona = load_persona(persona_dir, vocab)
    if persona.style_lm is None:
        raise click.UsageError(f"persona at {persona_dir} has no styled LM")
    l1 = persona.lambda1 if lambda1 is None else lambda1
    l2 = persona.lambda2 if lambda2 is None else lambda2
    src_tokens = tokenize(src)
    cands = generate_candidates(forward, lm, selector, src_tokens, n=n, seed=seed,
                                style_lm=persona.style_lm, lambda1=l1, lambda2=l2)
    for i, cand in enumerate(rerank(cands, backward, src_tokens)[:topn], start=1):
        click.echo(f"{i}\t{' '.join(cand.words(vocab))}\t{cand.composite:.6f}")


@scent.command("build-pseudo")
@click.option("--persona", "persona_dir", required=True, type=click.Path(exists=True))
@click.option("--backward", "backward_path", required=True, type=click.Path(exists=True))
@click.option("--lm", "lm_path", required=True, type=click.Path(exists=True))
@click.option("--selector", "selector_path", required=True, type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=7, show_default=True)
@click.option("--n-candidates", default=16, show_default=True)
def scent_build_pseudo(persona_dir, backward_path, lm_path, selector_path,
                       vocab_path, out, seed, n_candidates):
    """Write (pseudo context, styled sentence) pairs as TSV."""
    vocab = Vocabulary.load(vocab_path)
    backward = Seq2SeqModel.load(backward_path, vocab)
    lm = Seq2SeqModel.load(lm_path, vocab)
    selector = SelectorModel.load(selector_path)
    persona = load_persona(persona_dir, vocab)
    pairs = build_pseudo_pairs(persona.corpus, backward, selector, lm, seed=seed,
                               n_candidates=n_candidates)
    with open(out, "w", encoding="utf-8") as fh:
        for s, t in pairs.pairs:
            fh.write(f"{' '.join(s)}\t{' '.join(t)}\n")
    click.echo(f"{len(pairs.pairs)} pairs written to {out}")


@scent.command("finetune")
@click.option("--base", "base_path", required=True, type=click.Path(exists=True))
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--val", "val_path", required=True, type=click.Path(exists=True),
              help="monologue-format validation sentences")
@click.option("--out", required=True, type=click.Path())
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--lr", default=0.002, show_default=True)
@click.option("--batch", default=50, show_default=True)
@click.option("--max-epochs", default=10, show_default=True)
@click.option("--seed", default=7, show_default=True)
def scent_finetune(base_path, pairs_path, val_path, out, vocab_path, lr, batch,
                   max_epochs, seed):
    """Overtrain the base model on styled pairs with early stopping."""
    base, vocab = _model_with_vocab(base_path, vocab_path)
    pairs = load_pairs(pairs_path, format="pairs")
    val = load_pairs(val_path, format="monologue")
    styled, _, report = finetune(
        base, None, pairs, val,
        FinetuneConfig(lr=lr, batch=batch, max_epochs=max_epochs, seed=seed),
    )
    styled.save(out)
    ppls = ", ".join(f"{p:.3f}" for p in report.val_perplexities)
    click.echo(f"val perplexities: [{ppls}]; kept epoch {report.kept_epoch}")


# ---------------------------------------------------------------------------
# hints
# ---------------------------------------------------------------------------


@main.group()
def hints():
    """Retrieval index and counting-grid hint posteriors."""


@hints.command("build-index")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def hints_build_index(input_path, out):
    """Index a text file (one sentence per line)."""
    sentences = [tokenize(line) for line in _read_lines(input_path)]
    index = build_index(sentences)
    index.save(out)
    click.echo(f"{len(index)} sentences indexed")


@hints.command("search")
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--query", required=True)
@click.option("-k", default=10, show_default=True)
def hints_search(index_path, query, k):
    index = InvertedIndex.load(index_path)
    for sid, score in search(index, tokenize(query), k=k):
        click.echo(f"{sid}\t{score:.6f}\t{' '.join(index.sentences[sid])}")


@hints.command("posterior")
@click.option("--cg", "cg_path", required=True, type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--text", help="hint text")
@click.option("--cell", help="grid cell X,Y instead of text")
@click.option("--smoothing", default=3, show_default=True)
def hints_posterior(cg_path, vocab_path, text, cell, smoothing):
    """Print a flattened location posterior for a text or cell hint."""
    grid = cgrid.CGModel.load(cg_path)
    vocab = Vocabulary.load(vocab_path)
    if (text is None) == (cell is None):
        raise click.UsageError("supply exactly one of --text / --cell")
    if text is not None:
        vec = hint_posterior(grid, vocab, tokenize(text))
    else:
        x, y = (int(v) for v in cell.split(","))
        vec = cell_hint(grid, (x, y), smoothing=smoothing)
    click.echo(" ".join(f"{v:.9g}" for v in vec))


# ---------------------------------------------------------------------------
# rankeval / serve
# ---------------------------------------------------------------------------


@main.command("rankeval")
@click.option("--scorer", required=True,
              type=click.Choice(["forward", "forward/lm", "backward"]))
@click.option("--models", "models_dir", required=True, type=click.Path(exists=True))
@click.option("--instances", "instances_path", required=True,
              type=click.Path(exists=True))
def rankeval_cmd(scorer, models_dir, instances_path):
    """Evaluate ranking quality; prints MRR and P@1 separated by a TAB."""
    vocab = Vocabulary.load(os.path.join(models_dir, "vocab.txt"))

    def opt(name):
        path = os.path.join(models_dir, name)
        return Seq2SeqModel.load(path, vocab) if os.path.exists(path) else None

    models = {"forward": opt("forward.model"), "backward": opt("backward.model"),
              "lm": opt("lm.model")}
    result = ranking_eval(scorer, models, load_instances(instances_path))
    click.echo(f"{result['mrr']:.6f}\t{result['p_at_1']:.6f}")


@main.command("serve")
@click.option("--models", "models_dir", required=True, type=click.Path(exists=True))
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
def serve_cmd(models_dir, port, host):
    """Serve the HTTP API (and the console, if built) for the puppeteer UI."""
    import uvicorn

    from .service import create_app_from_dir

    uvicorn.run(create_app_from_dir(models_dir), host=host, port=port)


if __name__ == "__main__":
    main()
