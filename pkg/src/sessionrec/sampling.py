"""Negative sampling: supp^alpha distributions, a pre-sample cache, and
mini-batch slate assembly.

Two tiers of negatives per training example: the other examples' targets in
the same mini-batch (implicitly popularity-distributed, since training walks
every event), plus N_A additional samples drawn i.i.d. proportional to
supp_i^alpha and shared by the whole batch.  alpha=0 is uniform over items,
alpha=1 proportional to popularity.

Drawing goes through an alias table (O(1) per draw) and a large pre-drawn
cache so the refill cost amortizes over many batches.
"""

import numpy as np

from . import kernels

DEFAULT_CACHE_CAPACITY = 10_000_000


class SampleDistribution:
    """Item distribution P(i) = supp_i^alpha / sum_j supp_j^alpha.

    Holds the alias table (Vose construction) used for constant-time draws.
    Immutable; rebuild when alpha or the corpus changes.
    """

    def __init__(self, supports, alpha):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        supports = np.asarray(supports, dtype=np.float64)
        if supports.size == 0 or not (supports > 0).any():
            raise ValueError("need at least one item with positive support")
        self.alpha = float(alpha)
        with np.errstate(divide="ignore"):
            weights = np.where(supports > 0, supports ** alpha, 0.0)
        self.weights = weights
        self.probabilities = weights / weights.sum()
        self._prob, self._alias = _build_alias(self.probabilities)

    @property
    def n_items(self):
        return self.probabilities.shape[0]

    def draw(self, n, rng, backend=None):
        """n i.i.d. draws (int32 array) using the given numpy Generator."""
        out = np.empty(n, dtype=np.int32)
        if n == 0:
            return out
        u_index = rng.random(n)
        u_accept = rng.random(n)
        kernels.get_backend(backend).alias_draw(
            self._prob, self._alias, u_index, u_accept, out)
        return out


def _build_alias(probabilities):
    """Vose's alias method: per-cell acceptance probability and alias."""
    n = probabilities.shape[0]
    prob = np.zeros(n, dtype=np.float64)
    alias = np.zeros(n, dtype=np.int32)
    scaled = probabilities * n
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        if scaled[g] < 1.0:
            small.append(g)
        else:
            large.append(g)
    for leftover in (*small, *large):
        prob[leftover] = 1.0
        alias[leftover] = leftover
    return prob, alias


def build_distribution(corpus, alpha):
    """supp^alpha sampling distribution over a corpus's items."""
    return SampleDistribution(corpus.supports, alpha)


class SampleCache:
    """Pre-drawn buffer of sample ids, refilled only when it runs dry."""

    def __init__(self, dist, capacity=DEFAULT_CACHE_CAPACITY, rng=None,
                 backend=None):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.dist = dist
        self.capacity = int(capacity)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.backend = backend
        self._buffer = np.empty(0, dtype=np.int32)
        self._cursor = 0
        self.refill_count = 0

    def _remaining(self):
        return self._buffer.shape[0] - self._cursor

    def _refill(self):
        self._buffer = self.dist.draw(self.capacity, self.rng, self.backend)
        self._cursor = 0
        self.refill_count += 1

    def draw(self, n):
        """Take the next n pre-drawn ids, refilling as needed."""
        if n < 0:
            raise ValueError("n must be >= 0")
        out = np.empty(n, dtype=np.int32)
        filled = 0
        while filled < n:
            if self._remaining() == 0:
                self._refill()
            take = min(n - filled, self._remaining())
            out[filled:filled + take] = self._buffer[self._cursor:self._cursor + take]
            self._cursor += take
            filled += take
        return out


def draw_additional(cache, n):
    """The N_A shared additional samples for one mini-batch."""
    return cache.draw(n)


def assemble_slate_negatives(batch_targets, additional):
    """Negative index lists per example: the B-1 other targets of the batch,
    then the shared additional samples.  Shape (B, B-1+N_A).

    A negative equal to the example's own target is kept: the scores tie
    and the loss contributes its equal-score value (collision-filtering is
    the loss mask's job, see ``collision_mask``).
    """
    batch_targets = np.asarray(batch_targets)
    b = batch_targets.shape[0]
    n_a = len(additional)
    out = np.empty((b, b - 1 + n_a), dtype=np.int64)
    for k in range(b):
        out[k, :b - 1] = np.delete(batch_targets, k)
        out[k, b - 1:] = additional
    return out


def slate_columns(batch_size, n_additional):
    """Column gathers mapping a shared score matrix to per-example slates.

    Training scores the union slate [targets..., additional...] once per
    batch, giving S of shape (B, B+N_A): S[k, k] is example k's target
    score and the remaining columns S[k, neg_cols[k]] are its negatives
    (the B-1 other targets first, then the additional block).
    """
    b, n_a = batch_size, n_additional
    cols = np.empty((b, b - 1 + n_a), dtype=np.int64)
    base = np.arange(b, dtype=np.int64)
    for k in range(b):
        cols[k, :b - 1] = np.delete(base, k)
        cols[k, b - 1:] = b + np.arange(n_a, dtype=np.int64)
    return cols


def collision_mask(batch_targets, additional):
    """uint8 (B, B-1+N_A) marking additional samples equal to the example's
    own target, for the "mask" collision policy.  Mini-batch negatives are
    never masked."""
    batch_targets = np.asarray(batch_targets)
    b = batch_targets.shape[0]
    n_a = len(additional)
    mask = np.zeros((b, b - 1 + n_a), dtype=np.uint8)
    if n_a:
        mask[:, b - 1:] = (np.asarray(additional)[None, :]
                           == batch_targets[:, None]).astype(np.uint8)
    return mask
