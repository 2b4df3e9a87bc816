"""Session-based next-item recommendation with ranking-max losses.

Trains a compact GRU on session logs using session-parallel mini-batches,
mini-batch plus supp^alpha negative sampling, and a family of listwise
ranking losses; ships the evaluation protocol (Recall@K / MRR@K), gradient
diagnostics and an item-kNN baseline.
"""

__version__ = "0.1.0"

from .kernels import BACKEND as kernel_backend  # noqa: F401
