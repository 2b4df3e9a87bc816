"""Item-kNN baseline: session co-occurrence similarity, next-item scoring.

Two items are similar when they show up in the same sessions.  Similarity is
cosine over binary session incidence with an additive shrinkage on the
denominator:

    sim(i, j) = cooc(i, j) / (sqrt(supp_i * supp_j) + shrinkage)

with cooc counting sessions containing both (set semantics: repeats within a
session count once) and supp the corpus event counts.  Recommending = the
current item's neighbor list, best first.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .corpus import DataError
from .evaluate import MetricAccumulator


@dataclass
class SimilarityTable:
    """Per item: neighbor ids and similarities, sorted best-first.

    Items beyond each top-M list are unranked; evaluation treats them as
    misses.
    """

    neighbors: list   # list of int64 arrays
    sims: list        # list of float64 arrays, descending
    n_items: int

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("item\tneighbor\tsimilarity\n")
            for item in range(self.n_items):
                for j, s in zip(self.neighbors[item], self.sims[item]):
                    fh.write(f"{item}\t{j}\t{s:.10g}\n")

    @classmethod
    def load(cls, path, n_items=None):
        pairs = {}
        max_item = -1
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if header != ["item", "neighbor", "similarity"]:
                raise DataError(f"{path}: not a similarity table")
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected 3 columns")
                item, neigh, sim = int(parts[0]), int(parts[1]), float(parts[2])
                pairs.setdefault(item, ([], []))
                pairs[item][0].append(neigh)
                pairs[item][1].append(sim)
                max_item = max(max_item, item, neigh)
        if n_items is None:
            n_items = max_item + 1
        neighbors, sims = [], []
        for item in range(n_items):
            ns, ss = pairs.get(item, ([], []))
            neighbors.append(np.asarray(ns, dtype=np.int64))
            sims.append(np.asarray(ss, dtype=np.float64))
        return cls(neighbors, sims, n_items)


def fit(corpus, shrinkage=20.0, top_m=100):
    """Build the similarity table from a training corpus."""
    if shrinkage < 0:
        raise ValueError("shrinkage must be >= 0")
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    n = corpus.n_items
    rows, cols = [], []
    for sid, sess in enumerate(corpus.sessions):
        uniq = np.unique(sess)
        rows.append(np.full(uniq.shape, sid, dtype=np.int64))
        cols.append(uniq.astype(np.int64))
    incidence = sparse.csr_matrix(
        (np.ones(sum(len(c) for c in cols)),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(corpus.n_sessions, n))
    cooc = (incidence.T @ incidence).tocsr()
    cooc.setdiag(0)
    cooc.eliminate_zeros()

    denom_root = np.sqrt(corpus.supports.astype(np.float64))
    neighbors, sims = [], []
    for i in range(n):
        start, end = cooc.indptr[i], cooc.indptr[i + 1]
        js = cooc.indices[start:end]
        counts = cooc.data[start:end]
        s = counts / (denom_root[i] * denom_root[js] + shrinkage)
        keep = s > 0
        js, s = js[keep], s[keep]
        # sort by similarity descending, ties by lower item id
        order = np.lexsort((js, -s))[:top_m]
        neighbors.append(js[order].astype(np.int64))
        sims.append(s[order])
    return SimilarityTable(neighbors, sims, n)


def score_next(table, current_item):
    """Recommendation ranking after ``current_item``: (ids, similarities).

    Unknown items get an empty ranking.
    """
    if not 0 <= current_item < table.n_items:
        return np.empty(0, dtype=np.int64), np.empty(0)
    return table.neighbors[current_item], table.sims[current_item]


def evaluate_knn(table, test, k=20):
    """Run the shared next-item protocol with kNN scores.

    The target's rank is optimistic among the current item's neighbor list
    (1 + strictly-greater count); targets off the list count as misses.
    """
    acc = MetricAccumulator(k)
    for sess in test.sessions:
        for pos in range(len(sess) - 1):
            current, target = int(sess[pos]), int(sess[pos + 1])
            neigh, sims = score_next(table, current)
            hit = np.flatnonzero(neigh == target)
            if hit.size:
                rank = 1 + int((sims > sims[hit[0]]).sum())
            else:
                rank = np.inf
            acc.add_ranks([rank])
    return acc.report()
