import numpy as np
import pytest

from steergen.corpus import RESERVED, Vocabulary
from steergen.topic_hints import (
    InvertedIndex,
    build_index,
    cell_hint,
    hint_posterior,
    ir_hints,
    search,
)
from worlds import planted_cg, sample_bag_at


def cg_vocab(n_words):
    return Vocabulary(list(RESERVED) + [f"t{i}" for i in range(n_words)])


# ---------------------------------------------------------------------------
# index + search
# ---------------------------------------------------------------------------


def test_empty_index_returns_nothing():
    index = build_index([])
    assert len(index) == 0
    assert search(index, ["anything"]) == []


def test_single_sentence_retrievable_by_any_word():
    index = build_index([["hello", "green", "world"]])
    for word in ["hello", "green", "world"]:
        hits = search(index, [word])
        assert hits and hits[0][0] == 0


def test_duplicates_get_distinct_ids():
    index = build_index([["same", "text"], ["same", "text"]])
    assert len(index) == 2
    hits = search(index, ["same", "text"], k=5)
    assert [h[0] for h in hits] == [0, 1]  # equal scores, tie by id
    assert hits[0][1] == pytest.approx(hits[1][1])


def test_disjoint_query_returns_empty():
    index = build_index([["alpha", "beta"]])
    assert search(index, ["gamma"]) == []


def test_exact_duplicate_ranks_first():
    sentences = [
        ["the", "cake", "is", "great"],
        ["where", "are", "you"],
        ["cake", "tastes", "great"],
    ]
    index = build_index(sentences)
    hits = search(index, ["where", "are", "you"], k=3)
    assert hits[0][0] == 1
    assert hits[0][1] == pytest.approx(1.0)


def test_default_k_caps_results():
    index = build_index([["common", f"w{i}"] for i in range(30)])
    assert len(search(index, ["common"])) == 10


def test_search_is_idempotent():
    index = build_index([["a", "b"], ["b", "c"]])
    before = [list(s) for s in index.sentences]
    first = search(index, ["b"])
    second = search(index, ["b"])
    assert first == second
    assert [list(s) for s in index.sentences] == before


def test_index_file_roundtrip(tmp_path):
    sentences = [["one", "two"], ["three"]]
    index = build_index(sentences)
    path = tmp_path / "index.idx"
    index.save(str(path))
    loaded = InvertedIndex.load(str(path))
    assert loaded.sentences == sentences
    assert search(loaded, ["two"]) == search(index, ["two"])


# ---------------------------------------------------------------------------
# hint posteriors
# ---------------------------------------------------------------------------


def test_hint_vector_length_is_grid_area():
    vocab = cg_vocab(5)
    model = planted_cg((32, 32), (5, 5), len(vocab), [((3, 3), [3, 4])])
    vec = hint_posterior(model, vocab, ["t0"])
    assert vec.shape == (1024,)
    assert abs(vec.sum() - 1.0) < 1e-9


def test_empty_hint_is_uniform():
    vocab = cg_vocab(4)
    model = planted_cg((8, 8), (3, 3), len(vocab), [((1, 1), [3])])
    vec = hint_posterior(model, vocab, [])
    assert np.allclose(vec, 1.0 / 64)


def test_planted_hint_argmax_in_window():
    vocab = cg_vocab(9)
    cx, cy = 2, 5
    word_ids = [vocab.id_of("t0"), vocab.id_of("t1")]
    model = planted_cg((8, 8), (3, 3), len(vocab), [((cx, cy), word_ids)])
    vec = hint_posterior(model, vocab, ["t0", "t1", "t0"])
    ax, ay = divmod(int(np.argmax(vec)), 8)
    assert (ax - cx) % 8 < 3 and (ay - cy) % 8 < 3


def test_cell_hint_one_hot():
    model = planted_cg((8, 8), (3, 3), 6, [])
    vec = cell_hint(model, (2, 3), smoothing=1)
    assert vec[2 * 8 + 3] == 1.0
    assert vec.sum() == 1.0


def test_cell_hint_wraps_on_torus_edge():
    model = planted_cg((8, 8), (3, 3), 6, [])
    vec = cell_hint(model, (0, 0), smoothing=3).reshape(8, 8)
    nonzero = np.argwhere(vec > 0)
    assert len(nonzero) == 9
    assert np.allclose(vec[vec > 0], 1 / 9)
    for x, y in [(7, 7), (7, 0), (0, 7), (1, 1), (0, 0)]:
        assert vec[x, y] == pytest.approx(1 / 9)


@pytest.mark.parametrize("width", [1, 2, 3, 5])
def test_cell_hint_normalized_any_width(width):
    model = planted_cg((8, 8), (3, 3), 6, [])
    assert cell_hint(model, (4, 4), smoothing=width).sum() == pytest.approx(1.0)


def test_cell_hint_invalid_cell():
    model = planted_cg((4, 4), (3, 3), 6, [])
    with pytest.raises(ValueError):
        cell_hint(model, (9, 0))


def test_ir_hints_one_posterior_per_hit():
    vocab = cg_vocab(6)
    model = planted_cg((8, 8), (3, 3), len(vocab), [((1, 1), [3, 4])])
    sentences = [["t0", "t1"], ["t1", "t2"], ["t4", "t5"]]
    index = build_index(sentences)
    hints = ir_hints(index, model, vocab, ["t1"], k=10)
    assert len(hints) == 2  # two sentences contain t1
    again = ir_hints(index, model, vocab, ["t1"], k=10)
    for a, b in zip(hints, again):
        assert np.array_equal(a, b)
        assert abs(a.sum() - 1.0) < 1e-9
        assert a.shape == (64,)


def test_near_duplicate_hints_map_nearby():
    vocab = cg_vocab(10)
    ids = [vocab.id_of(w) for w in ["t0", "t1", "t2"]]
    model = planted_cg((16, 16), (3, 3), len(vocab), [((4, 4), ids)])
    a = hint_posterior(model, vocab, ["t0", "t1", "t2", "t0"])
    b = hint_posterior(model, vocab, ["t0", "t1", "t2", "t1"])
    ax, ay = divmod(int(np.argmax(a)), 16)
    bx, by = divmod(int(np.argmax(b)), 16)
    dx = min((ax - bx) % 16, (bx - ax) % 16)
    dy = min((ay - by) % 16, (by - ay) % 16)
    assert dx <= 3 and dy <= 3


def test_empty_retrieval_gives_empty_hint_list():
    vocab = cg_vocab(4)
    model = planted_cg((8, 8), (3, 3), len(vocab), [])
    index = build_index([["t0"]])
    assert ir_hints(index, model, vocab, ["zzz"], k=10) == []
