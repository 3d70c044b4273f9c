import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steergen.corpus import Bag
from steergen.counting_grid import (
    CGConfig,
    CGModel,
    bag_log_likelihood,
    em_fit,
    posterior,
    top_words,
    total_log_likelihood,
    window_histograms,
)
from worlds import naive_window_histograms, planted_cg, random_pi, sample_bag_at, sample_bags


def make_model(extent, window, pi):
    return CGModel(extent=extent, window=window, pi=pi)


# ---------------------------------------------------------------------------
# window histograms
# ---------------------------------------------------------------------------


def test_uniform_pi_gives_uniform_h():
    pi = np.full((4, 4, 5), 0.2)
    model = make_model((4, 4), (3, 3), pi)
    assert np.allclose(window_histograms(model), pi)


def test_identity_window_returns_pi():
    pi = random_pi((6, 5), 7, seed=1)
    model = make_model((6, 5), (1, 1), pi)
    assert np.array_equal(window_histograms(model), pi)


def test_sat_matches_naive_oracle():
    pi = random_pi((8, 8), 11, seed=2)
    model = make_model((8, 8), (3, 3), pi)
    expected = naive_window_histograms(pi, (3, 3))
    assert np.max(np.abs(window_histograms(model) - expected)) <= 1e-9


@pytest.mark.parametrize("extent", [(4, 4), (8, 8), (16, 16)])
@pytest.mark.parametrize("window", [(1, 1), (3, 3), (5, 5)])
def test_sat_oracle_grid(extent, window):
    if window[0] > extent[0]:
        pytest.skip("window larger than grid")
    pi = random_pi(extent, 9, seed=extent[0] * 10 + window[0])
    model = make_model(extent, window, pi)
    expected = naive_window_histograms(pi, window)
    assert np.max(np.abs(window_histograms(model) - expected)) <= 1e-9


def test_h_rows_normalized():
    pi = random_pi((8, 8), 13, seed=3)
    model = make_model((8, 8), (5, 5), pi)
    h = window_histograms(model)
    assert np.allclose(h.sum(axis=2), 1.0, atol=1e-9)


def test_toroidal_shift_equivariance():
    pi = random_pi((8, 8), 6, seed=4)
    model = make_model((8, 8), (3, 3), pi)
    dx, dy = 3, 5
    shifted = make_model((8, 8), (3, 3), np.roll(pi, (dx, dy), axis=(0, 1)))
    h = window_histograms(model)
    h_shifted = window_histograms(shifted)
    assert np.allclose(np.roll(h, (dx, dy), axis=(0, 1)), h_shifted, atol=1e-12)
    bag = Bag(counts={0: 2, 3: 1}, total=3)
    p = posterior(model, bag).reshape(8, 8)
    p_shifted = posterior(shifted, bag).reshape(8, 8)
    assert np.allclose(np.roll(p, (dx, dy), axis=(0, 1)), p_shifted, atol=1e-12)


# ---------------------------------------------------------------------------
# bag likelihood and posterior
# ---------------------------------------------------------------------------


def test_single_word_likelihood():
    pi = np.zeros((1, 1, 4))
    pi[0, 0] = [0.25, 0.25, 0.25, 0.25]
    model = make_model((1, 1), (1, 1), pi)
    assert bag_log_likelihood(model, Bag({0: 1}, 1), 0) == pytest.approx(np.log(0.25))


def test_count_acts_as_exponent():
    pi = np.zeros((1, 1, 3))
    pi[0, 0] = [0.5, 0.3, 0.2]
    model = make_model((1, 1), (1, 1), pi)
    assert bag_log_likelihood(model, Bag({1: 2}, 2), 0) == pytest.approx(2 * np.log(0.3))


def test_likelihood_matches_product_oracle():
    pi = random_pi((4, 4), 6, seed=5)
    model = make_model((4, 4), (3, 3), pi)
    bag = Bag({0: 2, 3: 1, 5: 4}, 7)
    h = window_histograms(model).reshape(16, 6)
    for loc in range(16):
        expected = 0.0
        for word, count in bag.counts.items():
            for _ in range(count):
                expected += np.log(h[loc, word])
        assert bag_log_likelihood(model, bag, loc) == pytest.approx(expected)


def test_empty_bag_likelihood_is_zero():
    model = make_model((2, 2), (1, 1), random_pi((2, 2), 3, seed=6))
    assert bag_log_likelihood(model, Bag({}, 0), 0) == 0.0


def test_zero_mass_gives_neg_inf():
    pi = np.zeros((1, 1, 2))
    pi[0, 0] = [1.0, 0.0]
    model = make_model((1, 1), (1, 1), pi)
    assert bag_log_likelihood(model, Bag({1: 1}, 1), 0) == float("-inf")


def test_uniform_pi_gives_uniform_posterior():
    pi = np.full((4, 4, 5), 0.2)
    model = make_model((4, 4), (3, 3), pi)
    p = posterior(model, Bag({0: 3, 2: 1}, 4))
    assert np.allclose(p, 1.0 / 16)


def test_empty_bag_posterior_is_prior():
    model = make_model((4, 4), (3, 3), random_pi((4, 4), 5, seed=7))
    assert np.allclose(posterior(model, Bag({}, 0)), 1.0 / 16)


@given(
    word_ids=st.lists(st.integers(min_value=0, max_value=6), min_size=1, max_size=30),
)
@settings(max_examples=50, deadline=None)
def test_posterior_normalized_for_any_bag(word_ids):
    model = make_model((4, 4), (3, 3), random_pi((4, 4), 7, seed=8))
    counts: dict[int, int] = {}
    for w in word_ids:
        counts[w] = counts.get(w, 0) + 1
    p = posterior(model, Bag(counts, len(word_ids)))
    assert p.shape == (16,)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.all(p >= 0)


def test_planted_bag_posterior_argmax_in_window():
    topics = [((2, 3), [0, 1, 2])]
    model = planted_cg((8, 8), (3, 3), 12, topics)
    rng = np.random.default_rng(9)
    center = 2 * 8 + 3
    for trial in range(5):
        bag = sample_bag_at(model, center, 15, rng)
        argmax = int(np.argmax(posterior(model, bag)))
        ax, ay = divmod(argmax, 8)
        # within the window anchored at the planted location (mod torus)
        dx = (ax - 2) % 8
        dy = (ay - 3) % 8
        assert dx < 3 and dy < 3


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


def test_em_trace_non_decreasing():
    gen = planted_cg((8, 8), (3, 3), 20, [((1, 1), [0, 1]), ((5, 5), [2, 3])])
    bags = sample_bags(gen, 200, 12, seed=10)
    _, trace = em_fit(bags, CGConfig(grid=(8, 8), window=(3, 3), iterations=15, seed=0), 20)
    assert len(trace) == 15
    for a, b in zip(trace, trace[1:]):
        assert b >= a - 1e-6


def test_em_zero_iterations():
    bags = [Bag({0: 1}, 1)]
    model, trace = em_fit(bags, CGConfig(grid=(2, 2), window=(1, 1), iterations=0, seed=1), 3)
    assert trace == []
    assert model.pi.shape == (2, 2, 3)


def test_single_cell_em_recovers_pooled_frequencies():
    bags = [Bag({0: 2, 1: 1}, 3), Bag({1: 2, 2: 1}, 3)]
    model, _ = em_fit(bags, CGConfig(grid=(1, 1), window=(1, 1), iterations=1, seed=2), 3)
    pooled = np.array([2, 3, 1]) / 6.0
    assert np.allclose(model.pi[0, 0], pooled, atol=1e-9)


def test_em_beats_unigram_on_held_out():
    gen = planted_cg(
        (8, 8), (3, 3), 30,
        [((0, 0), [0, 1, 2]), ((4, 4), [3, 4, 5]), ((0, 4), [6, 7, 8])],
    )
    train = sample_bags(gen, 400, 15, seed=11)
    held = sample_bags(gen, 100, 15, seed=12)
    learned, _ = em_fit(train, CGConfig(grid=(8, 8), window=(3, 3), iterations=25, seed=3), 30)
    unigram, _ = em_fit(train, CGConfig(grid=(1, 1), window=(1, 1), iterations=2, seed=3), 30)
    assert total_log_likelihood(learned, held) > total_log_likelihood(unigram, held)


def test_em_reproducible():
    gen = planted_cg((4, 4), (3, 3), 10, [((1, 1), [0, 1])])
    bags = sample_bags(gen, 50, 8, seed=13)
    cfg = CGConfig(grid=(4, 4), window=(3, 3), iterations=5, seed=4)
    m1, t1 = em_fit(bags, cfg, 10)
    m2, t2 = em_fit(bags, cfg, 10)
    assert np.array_equal(m1.pi, m2.pi)
    assert t1 == t2


# ---------------------------------------------------------------------------
# top words / serialization
# ---------------------------------------------------------------------------


def test_top_words_basic():
    pi = np.zeros((1, 1, 3))
    pi[0, 0] = [0.5, 0.3, 0.2]
    model = make_model((1, 1), (1, 1), pi)
    assert top_words(model, 0, 2) == [(0, 0.5), (1, pytest.approx(0.3))]


def test_top_words_tie_breaks_by_id():
    pi = np.full((1, 1, 4), 0.25)
    model = make_model((1, 1), (1, 1), pi)
    assert top_words(model, 0, 1) == [(0, 0.25)]


def test_top_words_k_beyond_vocab():
    pi = np.full((1, 1, 3), 1 / 3)
    model = make_model((1, 1), (1, 1), pi)
    assert len(top_words(model, 0, 99)) == 3


def test_top_word_at_planted_location():
    model = planted_cg((8, 8), (3, 3), 10, [((2, 2), [7])], peak=0.9)
    top = top_words(model, 2 * 8 + 2, 1)
    assert top[0][0] == 7


def test_save_load_roundtrip(tmp_path):
    model = planted_cg((4, 4), (3, 3), 6, [((0, 0), [1, 2])])
    path = tmp_path / "m.cg"
    model.save(str(path))
    loaded = CGModel.load(str(path))
    assert loaded.extent == (4, 4)
    assert loaded.window == (3, 3)
    assert np.array_equal(loaded.pi, model.pi)


def test_window_must_fit():
    with pytest.raises(ValueError):
        make_model((2, 2), (3, 3), np.full((2, 2, 3), 1 / 3))
