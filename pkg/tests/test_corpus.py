"""Corpus loading, filtering, splitting and session-parallel iteration."""

import numpy as np
import pytest

from sessionrec.corpus import (
    DataError,
    MiniBatchState,
    SessionCorpus,
    iter_batches,
    load_corpus,
    project_corpus,
    read_item_stats,
    time_split,
)


def write_log(tmp_path, rows, header="SessionId\tItemId\tTime", name="log.tsv"):
    path = tmp_path / name
    path.write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))
    return path


class TestLoadCorpus:
    def test_basic_counts(self, tmp_path):
        path = write_log(tmp_path, [
            "s1\tA\t1", "s1\tB\t2", "s1\tC\t3", "s2\tB\t4", "s2\tC\t5"])
        c = load_corpus(path)
        assert c.n_items == 3
        assert c.n_events == 5
        by_key = dict(zip(c.item_keys, c.supports))
        assert by_key == {"A": 1, "B": 2, "C": 2}

    def test_single_event_sessions_dropped(self, tmp_path):
        path = write_log(tmp_path, ["s1\tA\t1"])
        with pytest.raises(DataError, match="empty corpus"):
            load_corpus(path)

    def test_two_pass_filter_cascade(self, tmp_path):
        # X appears once; with min support 2 it goes, session {X,B} shrinks
        # to {B} and is dropped as too short
        path = write_log(tmp_path, [
            "s1\tX\t1", "s1\tB\t2", "s2\tB\t3", "s2\tC\t4", "s3\tB\t5", "s3\tC\t6"])
        c = load_corpus(path, min_item_support=2)
        assert "X" not in c.item_index
        assert c.n_sessions == 2
        assert dict(zip(c.item_keys, c.supports)) == {"B": 2, "C": 2}

    def test_filter_idempotent(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = []
        t = 0
        for sid in range(40):
            for _ in range(rng.integers(1, 6)):
                rows.append(f"s{sid}\ti{rng.integers(0, 12)}\t{t}")
                t += 1
        path = write_log(tmp_path, rows)
        c1 = load_corpus(path, min_item_support=3)
        # feed the filtered corpus back through the same filters
        rows2 = []
        t = 0
        for sid, sess in enumerate(c1.sessions):
            for item in sess:
                rows2.append(f"s{sid}\t{c1.item_keys[item]}\t{t}")
                t += 1
        path2 = write_log(tmp_path, rows2, name="log2.tsv")
        c2 = load_corpus(path2, min_item_support=3)
        assert c2.n_sessions == c1.n_sessions
        assert [c2.item_keys[i] for s in c2.sessions for i in s] == \
               [c1.item_keys[i] for s in c1.sessions for i in s]

    def test_time_sorting_stable_on_ties(self, tmp_path):
        path = write_log(tmp_path, [
            "s1\tB\t5", "s1\tA\t1", "s1\tC\t5"])  # B and C tie, B came first
        c = load_corpus(path)
        assert [c.item_keys[i] for i in c.sessions[0]] == ["A", "B", "C"]

    def test_missing_column(self, tmp_path):
        path = write_log(tmp_path, ["s1\t1"], header="SessionId\tTime")
        with pytest.raises(DataError, match="ItemId"):
            load_corpus(path)

    def test_unparseable_row_reports_line(self, tmp_path):
        path = write_log(tmp_path, ["s1\tA\t1", "s1\tB\tnot-a-time"])
        with pytest.raises(DataError, match=":3"):
            load_corpus(path)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            load_corpus(tmp_path / "nope.tsv")

    def test_custom_schema_and_delimiter(self, tmp_path):
        path = write_log(tmp_path, ["u1,X,1", "u1,Y,2"], header="sess,item,ts",
                         name="log.csv")
        c = load_corpus(path, session_col="sess", item_col="item",
                        time_col="ts", delimiter=",")
        assert c.n_events == 2

    def test_item_stats_roundtrip(self, tmp_path):
        path = write_log(tmp_path, ["s1\tA\t1", "s1\tB\t2", "s2\tA\t3", "s2\tB\t4"])
        c = load_corpus(path)
        stats = tmp_path / "items.tsv"
        c.write_item_stats(stats)
        keys, supports = read_item_stats(stats)
        assert keys == c.item_keys
        np.testing.assert_array_equal(supports, c.supports)


class TestTimeSplit:
    def _corpus(self):
        return SessionCorpus.from_sessions(
            [[0, 1], [1, 0], [0, 1]], ["A", "B", "C"],
            start_times=[1.0, 5.0, 9.0])

    def test_boundary_routes_sessions(self):
        train, test = time_split(self._corpus(), 3.0)
        assert train.n_sessions == 1 and test.n_sessions == 2

    def test_unseen_items_dropped_from_test(self):
        c = SessionCorpus.from_sessions(
            [[0, 1, 0], [1, 2, 1]], ["A", "B", "C"], start_times=[1.0, 5.0])
        train, test = time_split(c, 3.0)
        assert train.n_items == 2  # only A, B survive into the index
        # test session was B,C,B -> C dropped -> B,B
        assert [test.item_keys[i] for i in test.sessions[0]] == ["B", "B"]

    def test_test_index_is_train_index(self):
        train, test = time_split(self._corpus(), 7.0)
        assert test.item_keys == train.item_keys
        assert train.item_keys == ["A", "B"]  # C never occurs in a session

    def test_empty_test_is_error(self):
        with pytest.raises(DataError, match="test"):
            time_split(self._corpus(), 100.0)

    def test_empty_train_is_error(self):
        with pytest.raises(DataError, match="train"):
            time_split(self._corpus(), 0.5)


class TestProjectCorpus:
    def test_projects_onto_model_index(self):
        c = SessionCorpus.from_sessions([[0, 1, 2], [2, 1]], ["A", "B", "C"])
        projected = project_corpus(c, ["C", "B"])
        assert projected.n_items == 2
        assert [projected.item_keys[i] for i in projected.sessions[0]] == ["B", "C"]

    def test_nothing_survives(self):
        c = SessionCorpus.from_sessions([[0, 1]], ["A", "B"])
        with pytest.raises(DataError):
            project_corpus(c, ["X", "Y"])


def naive_pairs(corpus):
    out = []
    for sess in corpus.sessions:
        for i in range(len(sess) - 1):
            out.append((int(sess[i]), int(sess[i + 1])))
    return sorted(out)


class TestMiniBatches:
    def test_single_slot_trace(self):
        c = SessionCorpus.from_sessions([[0, 1, 2]])
        got = list(iter_batches(c, 1))
        assert [(int(i[0]), int(t[0]), bool(r[0])) for i, t, r, _ in got] == \
               [(0, 1, True), (1, 2, False)]

    def test_slot_refill_order(self):
        c = SessionCorpus.from_sessions([[0, 1], [2, 3], [4, 5]])
        emitted = []
        for inputs, targets, reset, slots in iter_batches(c, 2):
            emitted += list(zip(slots.tolist(), inputs.tolist(), reset.tolist()))
        # slot 0 serves the first session then the third; 3 pairs total
        assert emitted == [(0, 0, True), (1, 2, True), (0, 4, True)]

    def test_final_batches_shrink(self):
        c = SessionCorpus.from_sessions([[0, 1, 2, 3], [4, 5]])
        sizes = [len(b[0]) for b in iter_batches(c, 2)]
        assert sizes == [2, 1, 1]

    def test_epoch_completeness_random(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            n_items = int(rng.integers(3, 15))
            sessions = [rng.integers(0, n_items, size=rng.integers(2, 9)).tolist()
                        for _ in range(rng.integers(1, 12))]
            c = SessionCorpus.from_sessions(sessions, [str(i) for i in range(n_items)])
            b = int(rng.integers(1, 7))
            seen = []
            for inputs, targets, _, _ in iter_batches(c, b):
                seen += list(zip(inputs.tolist(), targets.tolist()))
            assert sorted(seen) == naive_pairs(c)

    def test_reset_marks_session_starts(self):
        rng = np.random.default_rng(2)
        sessions = [rng.integers(0, 5, size=rng.integers(2, 6)).tolist()
                    for _ in range(9)]
        c = SessionCorpus.from_sessions(sessions)
        starts_by_slot = {}
        for inputs, _, reset, slots in iter_batches(c, 3):
            for i, s, r in zip(inputs.tolist(), slots.tolist(), reset.tolist()):
                starts_by_slot.setdefault(s, []).append((i, r))
        # within a slot, resets occur exactly at first events of its sessions
        expected_first = [int(s[0]) for s in sessions]
        got_first = [i for slot in starts_by_slot.values()
                     for i, r in slot if r]
        assert sorted(got_first) == sorted(expected_first)

    def test_batch_size_validated(self):
        c = SessionCorpus.from_sessions([[0, 1]])
        with pytest.raises(ValueError):
            MiniBatchState(c, 0)
