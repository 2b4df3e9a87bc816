"""Session event logs: loading, filtering, splitting and batch iteration.

A corpus is an indexed, immutable view of a click log: items get dense ids,
sessions are kept in start-time order, events within a session in event-time
order.  Training consumes it through session-parallel mini-batches: B
sessions advance in lockstep, one event per step, a finished slot picking up
the next unstarted session.
"""

import csv
from dataclasses import dataclass, field

import numpy as np


class DataError(Exception):
    """Unreadable, malformed or empty input data."""


@dataclass
class SessionCorpus:
    """Indexed event log.

    ``sessions`` is a list of int32 arrays of dense item ids, ordered by the
    time of each session's first event.  ``supports`` counts each item's
    events across the retained sessions.  Instances are immutable after
    construction and safe to share across threads.
    """

    item_keys: list
    sessions: list
    supports: np.ndarray
    start_times: np.ndarray
    min_session_length: int = 2

    item_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.item_index = {k: i for i, k in enumerate(self.item_keys)}
        if len(self.item_index) != len(self.item_keys):
            raise DataError("item keys are not unique")

    @property
    def n_items(self):
        return len(self.item_keys)

    @property
    def n_sessions(self):
        return len(self.sessions)

    @property
    def n_events(self):
        return int(self.supports.sum())

    @classmethod
    def from_sessions(cls, sessions, item_keys=None, start_times=None,
                      min_session_length=2):
        """Build a corpus from in-memory sessions of dense ids (tests, synthetic data)."""
        sessions = [np.asarray(s, dtype=np.int32) for s in sessions]
        if item_keys is None:
            n = max((int(s.max()) for s in sessions if s.size), default=-1) + 1
            item_keys = [str(i) for i in range(n)]
        supports = np.zeros(len(item_keys), dtype=np.int64)
        for s in sessions:
            np.add.at(supports, s, 1)
        if start_times is None:
            start_times = np.arange(len(sessions), dtype=np.float64)
        return cls(list(item_keys), sessions, supports,
                   np.asarray(start_times, dtype=np.float64),
                   min_session_length=min_session_length)

    def write_item_stats(self, path):
        """Dump one line per item: dense index, external key, support."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("index\tkey\tsupport\n")
            for i, key in enumerate(self.item_keys):
                fh.write(f"{i}\t{key}\t{int(self.supports[i])}\n")


def read_item_stats(path):
    """Read the item stats dump back: (item_keys, supports)."""
    keys, supports = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:3] != ["index", "key", "support"]:
            raise DataError(f"{path}: not an item stats file")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns")
            if int(parts[0]) != len(keys):
                raise DataError(f"{path}:{lineno}: indexes out of order")
            keys.append(parts[1])
            supports.append(int(parts[2]))
    return keys, np.asarray(supports, dtype=np.int64)


def _parse_rows(path, session_col, item_col, time_col, delimiter):
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (header row required)") from None
        cols = {}
        for name in (session_col, item_col, time_col):
            try:
                cols[name] = header.index(name)
            except ValueError:
                raise DataError(f"{path}: missing column {name!r} "
                                f"(header has {header})") from None
        si, ii, ti = cols[session_col], cols[item_col], cols[time_col]
        width = max(si, ii, ti) + 1
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < width:
                raise DataError(f"{path}:{lineno}: expected at least {width} "
                                f"columns, got {len(row)}")
            try:
                t = float(row[ti])
            except ValueError:
                raise DataError(f"{path}:{lineno}: unparseable time "
                                f"{row[ti]!r}") from None
            rows.append((row[si], row[ii], t))
    return rows


def _filter_to_fixpoint(timed_sessions, min_session_length, min_item_support):
    """Drop under-supported items, then short sessions, until stable.

    Iterating matters: removing a short session lowers the supports of its
    items, which can push them under the threshold on the next round.  The
    fixpoint makes the filter idempotent.  Works on (start_time, [keys])
    pairs so session identities survive the passes.
    """
    while True:
        counts = {}
        for _, sess in timed_sessions:
            for key in sess:
                counts[key] = counts.get(key, 0) + 1
        kept_items = {k for k, c in counts.items() if c >= min_item_support}
        changed = len(kept_items) != len(counts)
        kept = []
        for t, sess in timed_sessions:
            trimmed = [k for k in sess if k in kept_items] if changed else sess
            if len(trimmed) >= min_session_length:
                kept.append((t, trimmed))
            else:
                changed = True
        timed_sessions = kept
        if not changed:
            return timed_sessions


def load_corpus(path, session_col="SessionId", item_col="ItemId",
                time_col="Time", delimiter="\t", min_session_length=2,
                min_item_support=1):
    """Load a delimited session log into a SessionCorpus.

    Events are grouped by session id, sorted by time within each session
    (stable, so ties keep input order); sessions are ordered by first-event
    time.  Items with fewer than ``min_item_support`` events are removed,
    then sessions shorter than ``min_session_length``, repeating until
    stable.
    """
    if min_session_length < 2:
        raise DataError("min_session_length must be >= 2 (need input/target pairs)")
    rows = _parse_rows(path, session_col, item_col, time_col, delimiter)

    by_session = {}
    for sid, key, t in rows:
        by_session.setdefault(sid, []).append((t, key))
    ordered = []
    for sid, events in by_session.items():
        events.sort(key=lambda e: e[0])  # stable: ties keep input order
        ordered.append((events[0][0], [k for _, k in events]))
    ordered.sort(key=lambda e: e[0])

    filtered = _filter_to_fixpoint(ordered, min_session_length, min_item_support)
    if not filtered:
        raise DataError(f"{path}: empty corpus after filtering "
                        f"(min_session_length={min_session_length}, "
                        f"min_item_support={min_item_support})")

    item_keys = []
    index = {}
    dense_sessions = []
    kept_times = []
    for t, sess in filtered:
        ids = []
        for key in sess:
            if key not in index:
                index[key] = len(item_keys)
                item_keys.append(key)
            ids.append(index[key])
        dense_sessions.append(np.asarray(ids, dtype=np.int32))
        kept_times.append(t)

    supports = np.zeros(len(item_keys), dtype=np.int64)
    for s in dense_sessions:
        np.add.at(supports, s, 1)
    return SessionCorpus(item_keys, dense_sessions, supports,
                         np.asarray(kept_times, dtype=np.float64),
                         min_session_length=min_session_length)


def time_split(corpus, boundary):
    """Split by session start time: first event < boundary goes to train.

    Test sessions drop items unseen in train, are re-filtered for minimum
    length, and share the train item index (test supports count test events
    only).
    """
    lo, hi = corpus.start_times.min(), corpus.start_times.max()
    if not (lo < boundary <= hi):
        if boundary <= lo:
            raise DataError(f"boundary {boundary} yields an empty train split")
        raise DataError(f"boundary {boundary} yields an empty test split")

    train_idx = np.flatnonzero(corpus.start_times < boundary)
    test_idx = np.flatnonzero(corpus.start_times >= boundary)
    if train_idx.size == 0:
        raise DataError("empty train split")
    if test_idx.size == 0:
        raise DataError("empty test split")

    # Re-index train items compactly; the test set adopts that index.
    train_sessions_raw = [corpus.sessions[i] for i in train_idx]
    old_ids = sorted({int(i) for s in train_sessions_raw for i in s})
    remap = -np.ones(corpus.n_items, dtype=np.int64)
    for new, old in enumerate(old_ids):
        remap[old] = new
    item_keys = [corpus.item_keys[i] for i in old_ids]

    train_sessions = [remap[s].astype(np.int32) for s in train_sessions_raw]
    train = SessionCorpus.from_sessions(
        train_sessions, item_keys,
        start_times=corpus.start_times[train_idx],
        min_session_length=corpus.min_session_length)

    test_sessions, test_times = [], []
    for i in test_idx:
        mapped = remap[corpus.sessions[i]]
        mapped = mapped[mapped >= 0]
        if mapped.size >= corpus.min_session_length:
            test_sessions.append(mapped.astype(np.int32))
            test_times.append(corpus.start_times[i])
    if not test_sessions:
        raise DataError("empty test split after dropping items unseen in train")
    test = SessionCorpus.from_sessions(
        test_sessions, item_keys, start_times=np.asarray(test_times),
        min_session_length=corpus.min_session_length)
    return train, test


def project_corpus(corpus, item_keys):
    """Re-express a corpus in another item index (e.g. a trained model's).

    Events whose item is not in ``item_keys`` are dropped; sessions falling
    under the corpus's minimum length are removed.
    """
    index = {k: i for i, k in enumerate(item_keys)}
    remap = np.asarray([index.get(k, -1) for k in corpus.item_keys],
                       dtype=np.int64)
    sessions, times = [], []
    for sess, t in zip(corpus.sessions, corpus.start_times):
        mapped = remap[sess]
        mapped = mapped[mapped >= 0]
        if mapped.size >= corpus.min_session_length:
            sessions.append(mapped.astype(np.int32))
            times.append(t)
    if not sessions:
        raise DataError("no session survives projection onto the model's item index")
    return SessionCorpus.from_sessions(
        sessions, list(item_keys), start_times=np.asarray(times),
        min_session_length=corpus.min_session_length)


class MiniBatchState:
    """Cursor state for session-parallel iteration.

    Each of the B slots walks one session; when its session runs out it
    loads the next unstarted one (in corpus order) and flags a hidden-state
    reset for its next emission.  Near the end of an epoch, slots with no
    session left drop out and batches shrink.
    """

    def __init__(self, corpus, batch_size):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.corpus = corpus
        self.batch_size = batch_size
        n = min(batch_size, corpus.n_sessions)
        self.session_of_slot = list(range(n))
        self.pos = [0] * n
        self.needs_reset = [True] * n
        self.next_session = n
        self.active = list(range(n))

    @property
    def exhausted(self):
        return not self.active

    def next_batch(self):
        """Emit one step: (inputs, targets, reset_mask, slots) or None."""
        if self.exhausted:
            return None
        slots = list(self.active)
        b = len(slots)
        inputs = np.empty(b, dtype=np.int64)
        targets = np.empty(b, dtype=np.int64)
        reset = np.zeros(b, dtype=bool)
        for out, k in enumerate(slots):
            sess = self.corpus.sessions[self.session_of_slot[k]]
            p = self.pos[k]
            inputs[out] = sess[p]
            targets[out] = sess[p + 1]
            reset[out] = self.needs_reset[k]
            self.needs_reset[k] = False
            if p + 2 < len(sess):
                self.pos[k] = p + 1
            else:
                self._load_next(k)
        return inputs, targets, reset, np.asarray(slots, dtype=np.int64)

    def _load_next(self, slot):
        if self.next_session < self.corpus.n_sessions:
            self.session_of_slot[slot] = self.next_session
            self.next_session += 1
            self.pos[slot] = 0
            self.needs_reset[slot] = True
        else:
            self.active.remove(slot)


def iter_batches(corpus, batch_size):
    """One epoch of session-parallel batches over the corpus."""
    state = MiniBatchState(corpus, batch_size)
    while True:
        batch = state.next_batch()
        if batch is None:
            return
        yield batch
