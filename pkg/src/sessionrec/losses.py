"""Ranking and cross-entropy losses over a score slate, with exact gradients.

A slate is one training example's view of the output layer: the target's
score r_i plus the scores r_j of the sampled negatives (mini-batch part
first, then the shared additional samples).  Five losses are available, by
name:

* ``xe``       cross-entropy of the softmax over {target} + negatives,
               stabilized either by an epsilon inside the log or by the
               logsumexp rewrite.
* ``top1``     mean over negatives of sigma(r_j - r_i) + sigma(r_j^2).
* ``bpr``      mean over negatives of -log sigma(r_i - r_j).
* ``top1-max`` TOP1 terms weighted by the softmax of the negative scores.
* ``bpr-max``  -log sum_j s_j sigma(r_i - r_j) + lambda sum_j s_j r_j^2.

The -max losses take the softmax over negatives only (the target is
excluded), which concentrates the loss on the hardest negatives instead of
averaging it away over easy ones.  All gradients are analytic and exact
for what is computed, including the softmax-weight chain rule and the
lambda penalty; the finite-difference suite in the tests holds every
returned partial to that standard.

Heavy lifting happens in :mod:`sessionrec.kernels`, batched over examples.
The single-slate functions below are convenience wrappers around batch
size 1.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

LOSS_NAMES = ("xe", "top1", "bpr", "top1-max", "bpr-max")
XE_VARIANTS = ("epsilon", "logsumexp")
DEFAULT_XE_EPS = 1e-24


@dataclass
class ScoreSlate:
    """Scores for one training example: target plus N_S negatives."""

    target_score: float
    negative_scores: np.ndarray

    def __post_init__(self):
        self.negative_scores = np.asarray(self.negative_scores, dtype=np.float64)


@dataclass
class LossResult:
    """Loss value with its partials w.r.t. the target and each negative."""

    value: float
    d_target: float
    d_negatives: np.ndarray = field(repr=False)


class LossFunction:
    """A named loss bound to its hyperparameters, callable on score batches.

    Calling convention: ``fn(targets, negatives, mask=None)`` with
    ``targets`` (B,), ``negatives`` (B, N_S) and an optional exclusion mask,
    returning ``(values, d_targets, d_negatives)``.
    """

    def __init__(self, name, reg_lambda=1.0, xe_variant="logsumexp",
                 xe_eps=DEFAULT_XE_EPS, backend=None):
        if name not in LOSS_NAMES:
            raise ValueError(f"unknown loss {name!r}; choose from {LOSS_NAMES}")
        if xe_variant not in XE_VARIANTS:
            raise ValueError(f"unknown xe variant {xe_variant!r}")
        if reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        self.name = name
        self.reg_lambda = float(reg_lambda)
        self.xe_variant = xe_variant
        self.xe_eps = float(xe_eps)
        self._k = kernels.get_backend(backend)

    def __call__(self, targets, negatives, mask=None):
        targets = np.ascontiguousarray(targets)
        negatives = np.ascontiguousarray(negatives)
        if mask is not None:
            mask = np.ascontiguousarray(mask, dtype=np.uint8)
        if self.name == "xe":
            return self._k.xe_batch(
                targets, negatives, eps=self.xe_eps,
                use_logsumexp=self.xe_variant == "logsumexp", mask=mask)
        if self.name == "top1":
            return self._k.top1_batch(targets, negatives, mask=mask)
        if self.name == "bpr":
            return self._k.bpr_batch(targets, negatives, mask=mask)
        if self.name == "top1-max":
            return self._k.top1_max_batch(targets, negatives, mask=mask)
        return self._k.bpr_max_batch(
            targets, negatives, reg_lambda=self.reg_lambda, mask=mask)

    def __repr__(self):
        extra = f", lambda={self.reg_lambda}" if self.name == "bpr-max" else ""
        return f"LossFunction({self.name!r}{extra})"


def get_loss(name, **kwargs):
    return LossFunction(name, **kwargs)


def _single(fn, slate, **kwargs):
    targets = np.asarray([slate.target_score], dtype=np.float64)
    negatives = slate.negative_scores.reshape(1, -1)
    values, d_t, d_n = fn(targets, negatives, **kwargs)
    return LossResult(float(values[0]), float(d_t[0]), d_n[0])


def softmax(scores):
    """Shift-invariant softmax of a score vector."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("softmax of an empty score list")
    e = np.exp(scores - scores.max())
    return e / e.sum()


def xe_loss(slate, variant="logsumexp", eps=DEFAULT_XE_EPS):
    """Cross-entropy -log s_i with the softmax taken over target + negatives."""
    fn = LossFunction("xe", xe_variant=variant, xe_eps=eps)
    return _single(fn, slate)


def top1_loss(slate):
    return _single(LossFunction("top1"), slate)


def bpr_loss(slate):
    return _single(LossFunction("bpr"), slate)


def top1_max_loss(slate):
    return _single(LossFunction("top1-max"), slate)


def bpr_max_loss(slate, reg_lambda=0.0):
    return _single(LossFunction("bpr-max", reg_lambda=reg_lambda), slate)
