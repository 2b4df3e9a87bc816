"""Pure-numpy implementation of the hot kernels.

Every function here has a drop-in twin in the compiled extension
(``_cykernels``); :mod:`sessionrec.kernels` picks one of the two at import
time.  Keep the two implementations semantically identical: same arguments,
same stabilizations, same treatment of masked entries.

Conventions shared by all loss kernels:

* ``targets`` has shape (B,), ``negatives`` shape (B, N); dtype float32 or
  float64 (both must match).
* ``mask`` is an optional uint8 array of shape (B, N); a nonzero entry
  EXCLUDES that negative from the loss (used by the collision-filter
  policy).  Excluded entries get exactly zero gradient.
* Returns ``(values, d_targets, d_negatives)`` with shapes (B,), (B,),
  (B, N) in the input dtype.
* A row whose negatives are all excluded contributes zero loss and zero
  gradients (there is nothing to rank against).

Numerical-stability ground rules: sigmoids via ``expit``, log-sigmoids via
``-logaddexp(0, -x)``, softmaxes shifted by the row max.  All kernels must
return finite values for scores anywhere in [-500, 500] at float32.
"""

import numpy as np
from scipy.special import expit

__all__ = [
    "xe_batch",
    "top1_batch",
    "bpr_batch",
    "top1_max_batch",
    "bpr_max_batch",
    "alias_draw",
]


def _as_2d(negatives):
    if negatives.ndim != 2:
        raise ValueError("negatives must be 2-D (batch, n_samples)")
    return negatives


def _included(negatives, mask):
    """Boolean (B, N) of negatives that participate, and per-row counts."""
    if mask is None:
        inc = np.ones(negatives.shape, dtype=bool)
    else:
        inc = mask == 0
    return inc, inc.sum(axis=1)


def _neg_softmax(negatives, inc):
    """Row softmax over the included negatives only (excluded get weight 0)."""
    shifted = np.where(inc, negatives, -np.inf)
    row_max = shifted.max(axis=1, keepdims=True)
    # Rows with nothing included would give -inf - -inf; guard with 0.
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(shifted - row_max)
    e[~inc] = 0.0
    z = e.sum(axis=1, keepdims=True)
    z[z == 0.0] = 1.0
    return e / z


def xe_batch(targets, negatives, eps=1e-24, use_logsumexp=True, mask=None):
    """Cross-entropy over the slate softmax (target plus negatives).

    ``use_logsumexp=True`` computes -r_i + log sum_j exp(r_j) directly;
    otherwise the loss is -log(s_i + eps) with the exact gradient of that
    expression (which matches the softmax gradient up to O(eps/s_i)).
    """
    negatives = _as_2d(negatives)
    inc, n_eff = _included(negatives, mask)
    dt = negatives.dtype.type

    shifted_neg = np.where(inc, negatives, -np.inf)
    row_max = np.maximum(shifted_neg.max(axis=1), targets)
    e_t = np.exp(targets - row_max)
    e_n = np.exp(shifted_neg - row_max[:, None])
    e_n[~inc] = 0.0
    z = e_t + e_n.sum(axis=1)
    s_t = e_t / z
    s_n = e_n / z[:, None]

    if use_logsumexp:
        values = -targets + row_max + np.log(z)
        d_targets = s_t - dt(1.0)
        d_negatives = s_n
    else:
        denom = s_t + dt(eps)
        values = -np.log(denom)
        g = s_t / denom
        d_targets = -g * (dt(1.0) - s_t)
        d_negatives = g[:, None] * s_n
    return values.astype(dt, copy=False), d_targets.astype(dt, copy=False), d_negatives


def top1_batch(targets, negatives, mask=None):
    """Average pairwise hinge-like loss sigma(r_j - r_i) + sigma(r_j^2)."""
    negatives = _as_2d(negatives)
    inc, n_eff = _included(negatives, mask)
    dt = negatives.dtype.type

    diff = negatives - targets[:, None]
    s1 = expit(diff)
    s1c = expit(-diff)  # 1 - s1, computed without cancellation
    sq = negatives * negatives
    s2 = expit(sq)
    s2c = expit(-sq)

    scale = np.zeros(targets.shape, dtype=negatives.dtype)
    np.divide(1.0, n_eff, out=scale, where=n_eff > 0)

    term = s1 + s2
    term[~inc] = 0.0
    values = term.sum(axis=1) * scale

    pair_grad = s1 * s1c
    pair_grad[~inc] = 0.0
    d_targets = -pair_grad.sum(axis=1) * scale

    d_negatives = (s1 * s1c + 2.0 * negatives * s2 * s2c) * scale[:, None]
    d_negatives[~inc] = 0.0
    return values.astype(dt, copy=False), d_targets.astype(dt, copy=False), d_negatives.astype(dt, copy=False)


def bpr_batch(targets, negatives, mask=None):
    """Average pairwise -log sigma(r_i - r_j)."""
    negatives = _as_2d(negatives)
    inc, n_eff = _included(negatives, mask)
    dt = negatives.dtype.type

    diff = targets[:, None] - negatives
    # -log sigma(x) = softplus(-x) = logaddexp(0, -x)
    nls = np.logaddexp(0.0, -diff)
    nls[~inc] = 0.0
    sig_c = expit(-diff)  # 1 - sigma(r_i - r_j), exact for large gaps
    sig_c[~inc] = 0.0

    scale = np.zeros(targets.shape, dtype=negatives.dtype)
    np.divide(1.0, n_eff, out=scale, where=n_eff > 0)

    values = nls.sum(axis=1) * scale
    d_targets = -sig_c.sum(axis=1) * scale
    d_negatives = sig_c * scale[:, None]
    return values.astype(dt, copy=False), d_targets.astype(dt, copy=False), d_negatives.astype(dt, copy=False)


def top1_max_batch(targets, negatives, mask=None):
    """TOP1 pairwise terms weighted by the softmax over negative scores.

    The softmax excludes the target, so weight concentrates on the
    highest-scoring negatives; the gradient w.r.t. each negative carries the
    full chain rule through its softmax weight.
    """
    negatives = _as_2d(negatives)
    inc, n_eff = _included(negatives, mask)
    dt = negatives.dtype.type

    s = _neg_softmax(negatives, inc)
    diff = negatives - targets[:, None]
    s1 = expit(diff)
    s1c = expit(-diff)
    sq = negatives * negatives
    s2 = expit(sq)
    s2c = expit(-sq)

    g = s1 + s2
    values = (s * g).sum(axis=1)
    d_targets = -(s * s1 * s1c).sum(axis=1)
    # d/dr_k = s_k * (pairwise'(k) + g_k - L)   [softmax jacobian folded in]
    d_negatives = s * (s1 * s1c + 2.0 * negatives * s2 * s2c + g - values[:, None])
    d_negatives[~inc] = 0.0

    empty = n_eff == 0
    if empty.any():
        values[empty] = 0.0
        d_targets[empty] = 0.0
    return values.astype(dt, copy=False), d_targets.astype(dt, copy=False), d_negatives.astype(dt, copy=False)


def bpr_max_batch(targets, negatives, reg_lambda=0.0, mask=None):
    """-log of the softmax-weighted pairwise probability, plus the
    softmax-weighted l2 penalty on negative scores.

    Loss: -log sum_j s_j sigma(r_i - r_j) + lambda * sum_j s_j r_j^2, with
    s_j the softmax over negatives only.  Both the log term and the penalty
    are differentiated exactly, including the dependence of s_j on every
    negative score.  Computed in log space so the probability never
    underflows to a hard zero.
    """
    negatives = _as_2d(negatives)
    inc, n_eff = _included(negatives, mask)
    dt = negatives.dtype.type

    shifted = np.where(inc, negatives, -np.inf)
    row_max = shifted.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    a = shifted - row_max
    e = np.exp(a)
    e[~inc] = 0.0
    z = e.sum(axis=1, keepdims=True)
    z[z == 0.0] = 1.0
    s = e / z
    log_s = a - np.log(z)

    diff = targets[:, None] - negatives
    log_sig = -np.logaddexp(0.0, -diff)  # log sigma(r_i - r_j)
    sig_c = expit(-diff)

    summand = log_s + log_sig
    summand[~inc] = -np.inf
    m = summand.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    ew = np.exp(summand - m)
    ew[~inc] = 0.0
    wsum = ew.sum(axis=1, keepdims=True)
    wsum[wsum == 0.0] = 1.0
    log_p = (m + np.log(wsum))[:, 0]
    w = ew / wsum  # w_j = s_j sigma_j / P, rows sum to 1

    values = -log_p
    d_targets = -(w * sig_c).sum(axis=1)
    # d(-log P)/dr_k = s_k - s_k sigma_k^2 / P
    d_negatives = s - np.exp(log_s + 2.0 * log_sig - log_p[:, None])

    if reg_lambda != 0.0:
        sq = negatives * negatives
        sq_in = np.where(inc, sq, 0.0)
        reg = (s * sq_in).sum(axis=1)
        values = values + dt(reg_lambda) * reg
        d_negatives = d_negatives + dt(reg_lambda) * s * (2.0 * negatives + sq - reg[:, None])

    d_negatives[~inc] = 0.0
    empty = n_eff == 0
    if empty.any():
        values[empty] = 0.0
        d_targets[empty] = 0.0
    return values.astype(dt, copy=False), d_targets.astype(dt, copy=False), d_negatives.astype(dt, copy=False)


def alias_draw(prob, alias, u_index, u_accept, out):
    """Draw from an alias table, consuming pre-generated uniforms.

    ``prob`` (float64) and ``alias`` (int32) describe the table; ``u_index``
    picks the column, ``u_accept`` the coin flip.  Taking the uniforms as
    arguments keeps the compiled and numpy backends bit-identical for the
    same random stream.
    """
    n = prob.shape[0]
    idx = (u_index * n).astype(np.int64)
    np.clip(idx, 0, n - 1, out=idx)
    take_alias = u_accept >= prob[idx]
    out[:] = np.where(take_alias, alias[idx], idx).astype(out.dtype, copy=False)
    return out
