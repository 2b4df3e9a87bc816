"""Training loop: session-parallel batches, sampling, loss, optimizer.

One optimizer step per mini-batch on the mean gradient across the batch's
examples.  The score matrix per step covers the union slate (the B targets
plus the N_A shared additional samples), so example k's target score sits at
column k and every other column is one of its negatives.
"""

import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as model_mod
from . import sampling
from .corpus import MiniBatchState
from .losses import DEFAULT_XE_EPS, LOSS_NAMES, XE_VARIANTS, LossFunction
from .model import GruParams, SparseRows, backward_step, backward_through, forward_step

OPTIMIZERS = ("adagrad", "sgd", "momentum")
COLLISION_POLICIES = ("keep", "mask")
ADAGRAD_EPS = 1e-6
DIVERGENCE_LIMIT = 1e4


class ConfigError(Exception):
    pass


class TrainingDiverged(Exception):
    """Batch loss went non-finite or past the divergence limit."""


@dataclass
class TrainConfig:
    loss: str = "bpr-max"
    batch_size: int = 32
    n_additional: int = 0
    alpha: float = 0.5
    reg_lambda: float = 1.0
    xe_variant: str = "logsumexp"
    xe_eps: float = DEFAULT_XE_EPS
    collision_policy: str = "keep"
    cache_capacity: int = sampling.DEFAULT_CACHE_CAPACITY
    learning_rate: float = 0.1
    optimizer: str = "adagrad"
    momentum: float = 0.0
    dropout: float = 0.0
    l2: float = 0.0
    epochs: int = 5
    bptt: int = 1
    seed: int = 42
    hidden: int = 100
    embedding: str = "onehot"
    embed_dim: int = 0
    activation: str = "identity"
    output_bias: bool = False
    checkpoint_every: int = 0
    checkpoint_path: str = ""

    def validate(self):
        if self.loss not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.loss!r} (choose from {LOSS_NAMES})")
        if self.xe_variant not in XE_VARIANTS:
            raise ConfigError(f"unknown xe variant {self.xe_variant!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.collision_policy not in COLLISION_POLICIES:
            raise ConfigError(f"unknown collision policy {self.collision_policy!r}")
        if self.embedding not in model_mod.EMBEDDING_MODES:
            raise ConfigError(f"unknown embedding mode {self.embedding!r}")
        if self.activation not in model_mod.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.reg_lambda < 0:
            raise ConfigError("reg-lambda must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.n_additional < 0:
            raise ConfigError("n-additional must be >= 0")
        if self.n_additional == 0 and self.batch_size < 2:
            raise ConfigError("no negatives available: need batch size >= 2 "
                              "when n-additional is 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.bptt < 1:
            raise ConfigError("bptt must be >= 1")
        if self.hidden < 1:
            raise ConfigError("hidden must be >= 1")
        if self.embedding == "separate" and self.embed_dim < 1:
            raise ConfigError("separate embedding requires embed-dim >= 1")
        if self.cache_capacity < 1:
            raise ConfigError("cache capacity must be >= 1")
        return self


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    n_examples: int
    wall_time: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch\tmean_loss\tn_examples\twall_time_s\n")
            for e in self.epochs:
                fh.write(f"{e.epoch}\t{e.mean_loss:.10g}\t{e.n_examples}"
                         f"\t{e.wall_time:.3f}\n")


class OptimizerState:
    """Per-parameter accumulators: squared-gradient sums for Adagrad,
    velocities for momentum.  Allocated lazily to the parameter shapes."""

    def __init__(self, params):
        self.accumulators = {name: np.zeros_like(arr)
                             for name, arr in params.arrays.items()}


def apply_update(params, grads, opt_state, config):
    """One optimizer step in place.  Sparse row gradients touch only their
    rows (of the parameter, its accumulator and the l2 term)."""
    lr = config.learning_rate
    for name, grad in grads.items():
        theta = params.arrays[name]
        acc = opt_state.accumulators[name]
        if isinstance(grad, SparseRows):
            idx, g = grad.idx, grad.val
            if config.l2:
                g = g + config.l2 * theta[idx]
            if config.optimizer == "adagrad":
                acc[idx] += g * g
                theta[idx] -= lr * g / (np.sqrt(acc[idx]) + ADAGRAD_EPS)
            elif config.optimizer == "momentum":
                acc[idx] = config.momentum * acc[idx] - lr * g
                theta[idx] += acc[idx]
            else:
                theta[idx] -= lr * g
        else:
            g = grad
            if config.l2:
                g = g + config.l2 * theta
            if config.optimizer == "adagrad":
                acc += g * g
                theta -= lr * g / (np.sqrt(acc) + ADAGRAD_EPS)
            elif config.optimizer == "momentum":
                acc *= config.momentum
                acc -= lr * g
                theta += acc
            else:
                theta -= lr * g


def _dropout_mask(rng, shape, rate, dtype):
    keep = 1.0 - rate
    return (rng.random(shape) >= rate).astype(dtype) / dtype(keep)


def train(corpus, config, params=None, on_epoch=None):
    """Train a GRU on the corpus; returns (params, TrainLog).

    All randomness (init, sampling, dropout) derives from config.seed, so a
    given config and corpus reproduce the training log exactly.
    """
    config.validate()
    if corpus.n_sessions == 0:
        raise ConfigError("empty corpus")

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    if params is None:
        params = GruParams(
            corpus.n_items, config.hidden, embedding=config.embedding,
            embed_dim=config.embed_dim or None, activation=config.activation,
            output_bias=config.output_bias, dtype=np.float32,
            seed=seeds[0])
    sample_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    cache = None
    if config.n_additional > 0:
        dist = sampling.build_distribution(corpus, config.alpha)
        cache = sampling.SampleCache(dist, config.cache_capacity, sample_rng)

    loss_fn = LossFunction(config.loss, reg_lambda=config.reg_lambda,
                           xe_variant=config.xe_variant, xe_eps=config.xe_eps)
    opt_state = OptimizerState(params)
    log = TrainLog()
    col_cache = {}

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        loss_sum = 0.0
        n_examples = 0
        hidden = params.zero_hidden(min(config.batch_size, corpus.n_sessions))
        state = MiniBatchState(corpus, config.batch_size)
        records = []

        while True:
            batch = state.next_batch()
            if batch is None:
                break
            inputs, targets, reset, slots = batch
            b = inputs.shape[0]

            additional = cache.draw(config.n_additional) if cache is not None \
                else np.empty(0, dtype=np.int32)
            slate = np.concatenate((targets, additional))

            key = (b, config.n_additional)
            if key not in col_cache:
                col_cache[key] = sampling.slate_columns(b, config.n_additional)
            neg_cols = col_cache[key]

            dmask = None
            if config.dropout > 0.0:
                dmask = _dropout_mask(dropout_rng, (b, params.hidden),
                                      config.dropout, params.dtype.type)

            h_in = hidden[slots]
            h_out, scores, record = forward_step(
                params, inputs, h_in, reset, slate_items=slate,
                dropout_mask=dmask, keep_record=True)
            record.slots = slots
            hidden[slots] = h_out

            target_scores = scores[np.arange(b), np.arange(b)]
            neg_scores = np.take_along_axis(scores, neg_cols, axis=1)
            mask = None
            if config.collision_policy == "mask" and config.n_additional > 0:
                mask = sampling.collision_mask(targets, additional)

            values, d_t, d_n = loss_fn(target_scores, neg_scores, mask=mask)
            batch_loss = float(values.mean())
            if not np.isfinite(batch_loss) or batch_loss > DIVERGENCE_LIMIT:
                raise TrainingDiverged(
                    f"epoch {epoch}: batch loss {batch_loss!r} "
                    f"(loss={config.loss}, lr={config.learning_rate})")
            loss_sum += float(values.sum())
            n_examples += b

            # mean over the batch: spread 1/b into the score gradients
            d_scores = np.zeros_like(scores)
            np.put_along_axis(d_scores, neg_cols, d_n, axis=1)
            d_scores[np.arange(b), np.arange(b)] = d_t
            d_scores /= b

            if config.bptt > 1:
                records.append(record)
                if len(records) > config.bptt:
                    records.pop(0)
                grads = backward_through(params, records, d_scores)
            else:
                grads = backward_step(params, record, d_scores)
            apply_update(params, grads, opt_state, config)

        stats = EpochStats(epoch, loss_sum / max(n_examples, 1), n_examples,
                           time.perf_counter() - t0)
        log.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats, params)
        if (config.checkpoint_every and config.checkpoint_path
                and epoch % config.checkpoint_every == 0):
            model_mod.save_model(params, config.checkpoint_path,
                                 meta=_model_meta(config))
    return params, log


def _model_meta(config):
    return {
        "loss": config.loss,
        "reg_lambda": config.reg_lambda,
        "xe_variant": config.xe_variant,
        "alpha": config.alpha,
        "n_additional": config.n_additional,
        "seed": config.seed,
    }


def grid_search(train_corpus, valid_corpus, base_config, grid, k=20,
                evaluate_fn=None):
    """Exhaustive search over a param grid, scored by Recall@k on the
    validation corpus.  Returns results sorted best-first:
    (recall, mrr, overrides, config) tuples."""
    from .evaluate import evaluate  # local import to avoid a cycle

    if evaluate_fn is None:
        evaluate_fn = evaluate
    names = list(grid)
    results = []
    for combo in itertools.product(*(grid[n] for n in names)):
        overrides = dict(zip(names, combo))
        cfg = replace(base_config, **overrides).validate()
        params, _ = train(train_corpus, cfg)
        report = evaluate_fn(params, valid_corpus, k=k)
        results.append((report.recall_at_k, report.mrr_at_k, overrides, cfg))
    results.sort(key=lambda r: (-r[0], -r[1]))
    return results
