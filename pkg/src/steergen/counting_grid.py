"""Toroidal Counting Grid topic model.

A grid of per-location word distributions ``pi`` generates a bag of words by
picking a latent window location and drawing every word from the window's
averaged histogram ``h``. Window averages, the EM E-step, and the M-step
re-estimation are all box sums over the torus and are computed with 2-D
summed-area tables (the grid is tiled by one window to handle wraparound).

Locations are addressed by row-major flat index ``x * E_y + y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .corpus import Bag

PI_FLOOR = 1e-10


@dataclass
class CGConfig:
    grid: tuple[int, int] = (16, 16)
    window: tuple[int, int] = (3, 3)
    iterations: int = 50
    seed: int = 0


@dataclass
class CGModel:
    """Counting grid parameters. Immutable after training; ``h`` is cached."""

    extent: tuple[int, int]
    window: tuple[int, int]
    pi: np.ndarray  # (E_x, E_y, V), rows sum to 1 over the vocabulary axis
    _h: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ex, ey = self.extent
        wx, wy = self.window
        if self.pi.shape[:2] != (ex, ey):
            raise ValueError("pi shape inconsistent with grid extent")
        if not (1 <= wx <= ex and 1 <= wy <= ey):
            raise ValueError("window must fit inside the grid")

    @property
    def n_locations(self) -> int:
        return self.extent[0] * self.extent[1]

    @property
    def vocab_size(self) -> int:
        return self.pi.shape[2]

    @property
    def h(self) -> np.ndarray:
        if self._h is None:
            self._h = window_histograms(self)
        return self._h

    def save(self, path: str) -> None:
        ex, ey = self.extent
        wx, wy = self.window
        with open(path, "wb") as fh:
            fh.write(f"cg-v1 {ex} {ey} {wx} {wy} {self.vocab_size}\n".encode())
            fh.write(np.ascontiguousarray(self.pi, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "CGModel":
        with open(path, "rb") as fh:
            header = fh.readline().decode().split()
            if len(header) != 6 or header[0] != "cg-v1":
                raise ValueError(f"{path}: not a cg-v1 file")
            ex, ey, wx, wy, v = map(int, header[1:])
            pi = np.frombuffer(fh.read(ex * ey * v * 8), dtype="<f8")
        return cls(extent=(ex, ey), window=(wx, wy), pi=pi.reshape(ex, ey, v).copy())


def _box_sum(arr: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    """Toroidal box sums: out[l] = sum of arr over the window anchored at l.

    arr is (E_x, E_y, ...); the window covers offsets [0, W) in each axis with
    wraparound. Computed via a summed-area table on the grid tiled by W-1.
    """
    wx, wy = window
    if wx == 1 and wy == 1:
        return arr.copy()
    ex, ey = arr.shape[:2]
    tiled = np.concatenate([arr, arr[: wx - 1]], axis=0)
    tiled = np.concatenate([tiled, tiled[:, : wy - 1]], axis=1)
    sat = np.zeros((tiled.shape[0] + 1, tiled.shape[1] + 1) + arr.shape[2:])
    np.cumsum(tiled, axis=0, out=sat[1:, 1:])
    np.cumsum(sat[1:, 1:], axis=1, out=sat[1:, 1:])
    return (
        sat[wx : wx + ex, wy : wy + ey]
        - sat[0:ex, wy : wy + ey]
        - sat[wx : wx + ex, 0:ey]
        + sat[0:ex, 0:ey]
    )


def _reverse_box_sum(arr: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    """out[k] = sum of arr over anchors whose window covers k (the mirrored box)."""
    wx, wy = window
    return np.roll(_box_sum(arr, window), shift=(wx - 1, wy - 1), axis=(0, 1))


def window_histograms(model: CGModel) -> np.ndarray:
    """Per-location window-averaged word distributions, shape (E_x, E_y, V)."""
    wx, wy = model.window
    return _box_sum(model.pi, model.window) / float(wx * wy)


def _bag_vector(bag: Bag, vocab_size: int) -> np.ndarray:
    v = np.zeros(vocab_size)
    for idx, c in bag.counts.items():
        v[idx] = c
    return v


def bag_log_likelihood(model: CGModel, bag: Bag, location: int) -> float:
    """log P(bag | location) = sum_z count(z) * log h_loc(z); -inf on zero mass."""
    if bag.total == 0:
        return 0.0
    ex, ey = model.extent
    h_loc = model.h.reshape(ex * ey, -1)[location]
    ids = np.fromiter(bag.counts.keys(), dtype=np.intp, count=len(bag.counts))
    cnt = np.fromiter(bag.counts.values(), dtype=np.float64, count=len(bag.counts))
    with np.errstate(divide="ignore"):
        logs = np.log(h_loc[ids])
    if np.any(np.isneginf(logs)):
        return float("-inf")
    return float(np.dot(cnt, logs))


def posterior(model: CGModel, bag: Bag) -> np.ndarray:
    """Normalized location posterior p(l | bag), flat row-major, length E_x*E_y.

    An empty bag returns the (uniform) location prior.
    """
    n = model.n_locations
    if bag.total == 0:
        return np.full(n, 1.0 / n)
    h_flat = model.h.reshape(n, -1)
    ids = np.fromiter(bag.counts.keys(), dtype=np.intp, count=len(bag.counts))
    cnt = np.fromiter(bag.counts.values(), dtype=np.float64, count=len(bag.counts))
    with np.errstate(divide="ignore"):
        log_post = np.log(h_flat[:, ids]) @ cnt
    log_post -= log_post.max()
    p = np.exp(log_post)
    return p / p.sum()


def _count_matrix(bags: list[Bag], vocab_size: int) -> sparse.csr_matrix:
    data, rows, cols = [], [], []
    for t, bag in enumerate(bags):
        for idx, c in bag.counts.items():
            rows.append(t)
            cols.append(idx)
            data.append(float(c))
    return sparse.csr_matrix(
        (data, (rows, cols)), shape=(len(bags), vocab_size)
    )


def init_pi(config: CGConfig, vocab_size: int) -> np.ndarray:
    """Symmetric Dirichlet(1) rows drawn with the run seed."""
    rng = np.random.default_rng(config.seed)
    ex, ey = config.grid
    raw = rng.gamma(1.0, size=(ex, ey, vocab_size))
    return raw / raw.sum(axis=2, keepdims=True)


def em_fit(
    bags: list[Bag], config: CGConfig, vocab_size: int
) -> tuple[CGModel, list[float]]:
    """Fit a counting grid with EM; returns the model and the per-iteration
    total log-likelihood trace (evaluated before each update)."""
    if not bags:
        raise ValueError("em_fit needs at least one bag")
    ex, ey = config.grid
    wx, wy = config.window
    pi = init_pi(config, vocab_size)
    counts = _count_matrix(bags, vocab_size)
    n_loc = ex * ey
    trace: list[float] = []

    for _ in range(config.iterations):
        h = _box_sum(pi, (wx, wy)) / float(wx * wy)
        log_h = np.log(np.maximum(h, 1e-300)).reshape(n_loc, vocab_size)
        # E-step: q_t(l) over locations (uniform prior cancels)
        log_post = counts @ log_h.T  # (n_bags, n_loc)
        mx = log_post.max(axis=1, keepdims=True)
        q = np.exp(log_post - mx)
        norm = q.sum(axis=1, keepdims=True)
        trace.append(float((np.log(norm) + mx - np.log(n_loc)).sum()))
        q /= norm
        # M-step: distribute counts back over covering windows
        t_mat = (counts.T @ q).T  # (n_loc, V)
        m = (t_mat / h.reshape(n_loc, vocab_size)).reshape(ex, ey, vocab_size)
        pi = pi * _reverse_box_sum(m, (wx, wy)) / float(wx * wy)
        pi /= np.maximum(pi.sum(axis=2, keepdims=True), 1e-300)
        pi = np.maximum(pi, PI_FLOOR)
        pi /= pi.sum(axis=2, keepdims=True)

    return CGModel(extent=(ex, ey), window=(wx, wy), pi=pi), trace


def total_log_likelihood(model: CGModel, bags: list[Bag]) -> float:
    """Sum over bags of log sum_l p(l) P(bag | l), used for held-out scoring."""
    n_loc = model.n_locations
    log_h = np.log(np.maximum(model.h, 1e-300)).reshape(n_loc, model.vocab_size)
    counts = _count_matrix(bags, model.vocab_size)
    log_post = counts @ log_h.T
    mx = log_post.max(axis=1, keepdims=True)
    lse = np.log(np.exp(log_post - mx).sum(axis=1, keepdims=True)) + mx
    return float((lse - np.log(n_loc)).sum())


def top_words(model: CGModel, location: int, k: int) -> list[tuple[int, float]]:
    """The k highest-probability word ids at a location, ties by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ex, ey = model.extent
    row = model.pi.reshape(ex * ey, -1)[location]
    k = min(k, row.size)
    order = np.lexsort((np.arange(row.size), -row))
    return [(int(i), float(row[i])) for i in order[:k]]
