import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from steergen.corpus import PairDataset  # noqa: E402
from steergen.decoding import SelectorConfig, train_selector  # noqa: E402
from steergen.scenting import PersonaBundle, save_persona  # noqa: E402
from steergen.seq2seq import SeqConfig, Seq2SeqModel, TrainConfig, train  # noqa: E402
from steergen.topic_hints import build_index  # noqa: E402
from worlds import keyed_response_task, planted_cg, styled_monologue, vocab_for  # noqa: E402


def train_lm(vocab, data, seq_config, train_config):
    """Language model = same architecture trained with the null source."""
    lm_data = PairDataset(pairs=[([], t) for _, t in data.pairs])
    model = Seq2SeqModel(vocab, seq_config)
    train(model, lm_data, train_config)
    return model


@pytest.fixture(scope="session")
def keyed_world():
    """Small trained model family on the keyed-response task.

    q{i} deterministically answers r{i} r{i+1} r{i+2}; the backward model is
    trained on the swapped pairs. Shared across decoding/scenting/eval tests.
    """
    data = keyed_response_task(n_keys=8, reps=30)
    vocab = vocab_for(data)
    cfg = SeqConfig(d=12, m=32, layers=2, seed=0)
    tcfg = TrainConfig(lr=0.015, epochs=30, batch=10, seed=0)

    forward = Seq2SeqModel(vocab, cfg)
    train(forward, data, tcfg)

    backward_data = PairDataset(pairs=[(t, s) for s, t in data.pairs])
    backward = Seq2SeqModel(vocab, SeqConfig(d=12, m=32, layers=2, seed=1))
    train(backward, backward_data, tcfg)

    lm = train_lm(vocab, data, SeqConfig(d=12, m=32, layers=2, seed=2),
                  TrainConfig(lr=0.015, epochs=10, batch=10, seed=0))

    selector = train_selector(
        forward, lm, PairDataset(pairs=data.pairs[:60]),
        SelectorConfig(epochs=4, seed=0),
    )
    return {
        "data": data,
        "vocab": vocab,
        "forward": forward,
        "backward": backward,
        "lm": lm,
        "selector": selector,
    }


@pytest.fixture(scope="session")
def model_dir(keyed_world, tmp_path_factory):
    """Full on-disk model directory in the layout the service and CLI expect."""
    w = keyed_world
    vocab = w["vocab"]
    root = tmp_path_factory.mktemp("models")

    vocab.save(str(root / "vocab.txt"))
    w["forward"].save(str(root / "forward.model"))
    w["backward"].save(str(root / "backward.model"))
    w["lm"].save(str(root / "lm.model"))
    w["selector"].save(str(root / "selector.model"))

    r_ids = [vocab.id_of(f"r{i}") for i in range(8)]
    grid = planted_cg((8, 8), (3, 3), len(vocab),
                      [((1, 1), r_ids[:4]), ((5, 5), r_ids[4:])])
    grid.save(str(root / "cg.model"))

    index = build_index([t for _, t in w["data"].pairs[:40]])
    index.save(str(root / "index.idx"))

    # topic-conditioned model matching the 8x8 grid (random weights suffice
    # for plumbing tests; the steering experiment trains a real one)
    topic_model = Seq2SeqModel(
        vocab, SeqConfig(d=12, m=16, layers=2, topic_width=64, seed=5))
    topic_model.save(str(root / "topic.model"))

    corpus = styled_monologue("r7", 10, seed=8, vocab=["r0", "r1", "r2"], length=4)
    poet = PersonaBundle(name="poet", corpus=corpus, style_lm=w["lm"].clone(),
                         finetuned=w["forward"].clone(),
                         styled_selector=w["selector"], lambda2=0.6)
    save_persona(poet, str(root / "personas" / "poet"))

    topic_poet = PersonaBundle(name="topic-poet", corpus=corpus,
                               finetuned=topic_model.clone())
    save_persona(topic_poet, str(root / "personas" / "topic-poet"))
    return root
