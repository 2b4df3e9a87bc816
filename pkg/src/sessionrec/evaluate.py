"""Next-item evaluation (Recall@K, MRR@K) and gradient diagnostics.

The protocol walks every test session in order: each event from the second
one on is a prediction case, the model ranks all items (or a restricted
candidate set) given the session so far, and the target's rank feeds the
metrics.  Rank uses the optimistic tie rule: 1 + the number of items scoring
strictly higher.
"""

from dataclasses import dataclass

import numpy as np

from . import sampling
from .corpus import MiniBatchState
from .losses import LossFunction
from .model import forward_step, score_all


class EvalError(Exception):
    pass


@dataclass
class EvalReport:
    recall_at_k: float
    mrr_at_k: float
    k: int
    n_cases: int
    rank_histogram: np.ndarray  # counts for ranks 1..k, then one beyond-k bin

    def to_text(self):
        lines = [
            f"cases:     {self.n_cases}",
            f"recall@{self.k}: {self.recall_at_k:.6f}",
            f"mrr@{self.k}:    {self.mrr_at_k:.6f}",
        ]
        return "\n".join(lines) + "\n"

    def to_tsv(self):
        lines = ["metric\tvalue",
                 f"k\t{self.k}",
                 f"n_cases\t{self.n_cases}",
                 f"recall_at_k\t{self.recall_at_k:.10g}",
                 f"mrr_at_k\t{self.mrr_at_k:.10g}"]
        for i in range(1, self.k + 1):
            lines.append(f"rank_{i}\t{int(self.rank_histogram[i - 1])}")
        lines.append(f"rank_gt_{self.k}\t{int(self.rank_histogram[self.k])}")
        return "\n".join(lines) + "\n"


class MetricAccumulator:
    """Shared rank-to-metric reduction for the GRU and kNN evaluators.

    Feed 1-based target ranks (np.inf for unranked targets); read off
    Recall@k and MRR@k.  The reciprocal rank is zero whenever the rank
    exceeds k.
    """

    def __init__(self, k):
        if k < 1:
            raise EvalError("k must be >= 1")
        self.k = k
        self.n_cases = 0
        self.hits = 0
        self.rr_sum = 0.0
        self.histogram = np.zeros(k + 1, dtype=np.int64)

    def add_ranks(self, ranks):
        ranks = np.asarray(ranks, dtype=np.float64)
        self.n_cases += ranks.size
        within = ranks <= self.k
        self.hits += int(within.sum())
        self.rr_sum += float((1.0 / ranks[within]).sum())
        bins = np.where(within, ranks, self.k + 1).astype(np.int64) - 1
        np.add.at(self.histogram, bins, 1)

    def report(self):
        if self.n_cases == 0:
            raise EvalError("no evaluation cases (empty test set?)")
        return EvalReport(self.hits / self.n_cases, self.rr_sum / self.n_cases,
                          self.k, self.n_cases, self.histogram)


def popularity_set(corpus, n):
    """The n most-supported items; support ties go to the lower index."""
    if n > corpus.n_items:
        raise EvalError(f"n={n} exceeds the {corpus.n_items}-item catalog")
    order = np.lexsort((np.arange(corpus.n_items), -corpus.supports))
    return np.sort(order[:n])


def evaluate(params, test, k=20, restrict=None, batch_size=128):
    """Model metrics over a test corpus sharing the model's item index.

    ``restrict`` (optional item-id array) limits the competition to that
    candidate set plus the target itself, as in popularity-restricted
    evaluation of very large catalogs.
    """
    if test.n_sessions == 0:
        raise EvalError("empty test corpus")
    if restrict is not None:
        restrict = np.asarray(restrict, dtype=np.int64)

    acc = MetricAccumulator(k)
    state = MiniBatchState(test, batch_size)
    hidden = params.zero_hidden(min(batch_size, test.n_sessions))
    while True:
        batch = state.next_batch()
        if batch is None:
            break
        inputs, targets, reset, slots = batch
        h_out, _ = forward_step(params, inputs, hidden[slots], reset)
        hidden[slots] = h_out
        scores = score_all(params, h_out)
        target_scores = scores[np.arange(len(targets)), targets]
        pool = scores if restrict is None else scores[:, restrict]
        ranks = 1 + (pool > target_scores[:, None]).sum(axis=1)
        acc.add_ranks(ranks)
    return acc.report()


DEFAULT_BUCKET_EDGES = (0, 1, 2, 3, 4, 5, 7, 10, 14, 20, 30, 50, 70, 100,
                        150, 200, 300, 400, 500, 700, 1000, 1500, 2000, 3000)


@dataclass
class GradientRankTable:
    """Median -dL/d(target score) bucketed by the target's sample rank.

    Rank here counts the negatives scoring above the target: rank 0 means
    the target beats every sample.
    """

    bucket_low: np.ndarray
    bucket_high: np.ndarray   # exclusive
    median_neg_grad: np.ndarray
    count: np.ndarray

    def to_tsv(self):
        lines = ["bucket_low\tbucket_high\tmedian_neg_grad\tcount"]
        for lo, hi, med, cnt in zip(self.bucket_low, self.bucket_high,
                                    self.median_neg_grad, self.count):
            med_s = f"{med:.10g}" if np.isfinite(med) else "nan"
            lines.append(f"{lo}\t{hi}\t{med_s}\t{cnt}")
        return "\n".join(lines) + "\n"


def gradient_vs_rank(params, corpus, loss_name, batch_size=32, n_additional=0,
                     alpha=0.5, reg_lambda=1.0, n_events=10_000,
                     bucket_edges=DEFAULT_BUCKET_EDGES, seed=0):
    """Measure the loss's pull on the target score as a function of how many
    negatives outrank it, with slates built exactly as in training.

    Sessions are visited in a seeded random order until ``n_events``
    prediction cases are collected; per case we record the target's rank
    among its negatives and the analytic -dL/dr_i, then report bucket
    medians.
    """
    if loss_name not in ("bpr", "bpr-max", "top1", "top1-max"):
        raise EvalError(f"gradient diagnostic needs a ranking loss, got {loss_name!r}")
    loss_fn = LossFunction(loss_name, reg_lambda=reg_lambda)
    rng = np.random.default_rng(seed)

    order = rng.permutation(corpus.n_sessions)
    shuffled = type(corpus).from_sessions(
        [corpus.sessions[i] for i in order], corpus.item_keys,
        start_times=corpus.start_times[order],
        min_session_length=corpus.min_session_length)

    cache = None
    if n_additional > 0:
        dist = sampling.build_distribution(corpus, alpha)
        cache = sampling.SampleCache(
            dist, capacity=max(n_additional * 64, 1024), rng=rng)

    ranks_all, grads_all = [], []
    state = MiniBatchState(shuffled, batch_size)
    hidden = params.zero_hidden(min(batch_size, shuffled.n_sessions))
    col_cache = {}
    collected = 0
    while collected < n_events:
        batch = state.next_batch()
        if batch is None:
            break
        inputs, targets, reset, slots = batch
        b = inputs.shape[0]
        additional = cache.draw(n_additional) if cache is not None \
            else np.empty(0, dtype=np.int32)
        slate = np.concatenate((targets, additional))
        h_out, scores = forward_step(params, inputs, hidden[slots], reset,
                                     slate_items=slate)
        hidden[slots] = h_out

        key = (b, n_additional)
        if key not in col_cache:
            col_cache[key] = sampling.slate_columns(b, n_additional)
        neg_cols = col_cache[key]
        target_scores = scores[np.arange(b), np.arange(b)]
        neg_scores = np.take_along_axis(scores, neg_cols, axis=1)

        _, d_t, _ = loss_fn(target_scores, neg_scores)
        ranks = (neg_scores > target_scores[:, None]).sum(axis=1)
        ranks_all.append(ranks)
        grads_all.append(-d_t)
        collected += b

    if not ranks_all:
        raise EvalError("corpus yielded no events for the diagnostic")
    ranks = np.concatenate(ranks_all)[:n_events]
    neg_grads = np.concatenate(grads_all)[:n_events]

    edges = [e for e in bucket_edges if e <= ranks.max()] or [0]
    lows = np.asarray(edges, dtype=np.int64)
    highs = np.append(lows[1:], max(int(ranks.max()) + 1, int(lows[-1]) + 1))
    medians = np.full(lows.shape, np.nan)
    counts = np.zeros(lows.shape, dtype=np.int64)
    for i, (lo, hi) in enumerate(zip(lows, highs)):
        sel = (ranks >= lo) & (ranks < hi)
        counts[i] = int(sel.sum())
        if counts[i]:
            medians[i] = float(np.median(neg_grads[sel]))
    return GradientRankTable(lows, highs, medians, counts)
