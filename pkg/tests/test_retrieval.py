import numpy as np
import pytest

from mmembed.data.manifest import ManifestRecord
from mmembed.retrieval import (EvalError, RetrievalIndex, TaskSpec, evaluate_task, mrr_at_k,
                               recall_at_k, search)


def _unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _brute_force(matrix, ids, q, k):
    scored = [(-float(np.dot(row, q)), cid) for row, cid in zip(matrix, ids)]
    scored.sort()
    return [cid for _, cid in scored[:k]]


def test_search_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(1, 40))
        matrix = _unit_rows(rng, n, 6)
        if trial % 4 == 0 and n > 2:
            matrix[1] = matrix[0]                  # exact tie
        ids = [f"c{i:03d}" for i in rng.permutation(n)]
        q = _unit_rows(rng, 1, 6)[0]
        k = int(rng.integers(1, n + 3))
        got = [cid for cid, _ in search(RetrievalIndex(ids, matrix), q, k)]
        assert got == _brute_force(matrix, ids, q, k)


def test_tie_goes_to_smaller_id():
    m = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    got = search(RetrievalIndex(["b", "a", "c"], m), np.array([1.0, 0.0]), 2)
    assert [cid for cid, _ in got] == ["a", "b"]


def test_search_k_exceeds_corpus():
    m = np.eye(3)
    assert len(search(RetrievalIndex(["x", "y", "z"], m), m[0], 10)) == 3


def test_index_validation():
    with pytest.raises(EvalError):
        RetrievalIndex(["a", "a"], np.eye(2))
    with pytest.raises(EvalError):
        RetrievalIndex(["a"], np.array([[2.0, 0.0]]))
    with pytest.raises(EvalError):
        search(RetrievalIndex([], np.zeros((0, 2))), np.ones(2), 1)
    with pytest.raises(EvalError):
        search(RetrievalIndex(["a"], np.eye(1)), np.ones(1), 0)


def _rankings_with_first_hit(ranks, depth=20):
    rankings, qrels = {}, {}
    for i, r in enumerate(ranks):
        qid = f"q{i}"
        ranking = [f"n{i}_{j}" for j in range(depth)]
        if r is not None:
            ranking[r - 1] = f"rel{i}"
        rankings[qid] = ranking
        qrels[qid] = {f"rel{i}"}
    return rankings, qrels


def test_recall_fixture():
    rankings, qrels = _rankings_with_first_hit([1, 2, 3, 6, 6, 11, 11])
    assert recall_at_k(rankings, qrels, 5) == pytest.approx(3 / 7, abs=1e-12)
    assert recall_at_k(rankings, qrels, 10) == pytest.approx(5 / 7, abs=1e-12)
    assert recall_at_k(rankings, qrels, 20) == pytest.approx(1.0, abs=1e-12)


def test_mrr_examples():
    rankings, qrels = _rankings_with_first_hit([1, 2, 4, None, 11])
    want = (1 + 1 / 2 + 1 / 4 + 0 + 0) / 5
    assert mrr_at_k(rankings, qrels, 10) == pytest.approx(want, abs=1e-12)


def test_multiple_relevant_counts_once():
    rankings = {"q": ["a", "b", "c"]}
    qrels = {"q": {"a", "b"}}
    assert recall_at_k(rankings, qrels, 2) == 1.0
    assert mrr_at_k(rankings, qrels) == 1.0


def test_metric_input_errors():
    with pytest.raises(EvalError):
        recall_at_k({}, {}, 5)
    with pytest.raises(EvalError):
        recall_at_k({"q": ["a"]}, {}, 5)


# ---------------------------------------------------------------------------
# task harness with stub encoders

class OneHotEncoder:
    """Maps each query onto the one-hot of its relevant document."""
    fusion = "stub"

    def __init__(self, slots):
        self.slots = slots

    def encode(self, records):
        out = np.zeros((len(records), len(self.slots)))
        for i, r in enumerate(records):
            out[i, self.slots[r.text]] = 1.0
        return out


class ConstantEncoder:
    fusion = "stub"

    def encode(self, records):
        return np.tile(np.array([1.0, 0.0]), (len(records), 1))


def _toy_task(n=30):
    corpus = [ManifestRecord(f"d{i:02d}", "text", f"doc{i}") for i in range(n)]
    queries = [ManifestRecord(f"q{i:02d}", "text", f"doc{i}", split="dev") for i in range(n)]
    qrels = {f"q{i:02d}": {f"d{i:02d}"} for i in range(n)}
    return TaskSpec("toy", queries, corpus, qrels)


def test_perfect_encoder_scores_one():
    task = _toy_task()
    slots = {f"doc{i}": i for i in range(30)}
    rep = evaluate_task(task, OneHotEncoder(slots))
    assert all(v == 1.0 for v in rep.recall.values())
    assert rep.mrr_at_10 == 1.0
    assert rep.corpus_size == 30 and rep.n_queries == 30


def test_constant_encoder_ranks_by_id():
    task = _toy_task()
    rep = evaluate_task(task, ConstantEncoder())
    # every query sees d00..d04 on top, so only q00..q04 hit at 5
    assert rep.recall[5] == pytest.approx(5 / 30)
    assert rep.recall[20] == pytest.approx(20 / 30)


def test_task_validation():
    task = _toy_task(3)
    task.qrels["q00"] = {"missing"}
    with pytest.raises(EvalError, match="missing"):
        evaluate_task(task, ConstantEncoder())
    task = _toy_task(3)
    task.corpus.append(task.corpus[0])
    with pytest.raises(EvalError, match="duplicate"):
        evaluate_task(task, ConstantEncoder())


def test_report_json_fields():
    rep = evaluate_task(_toy_task(5), ConstantEncoder(), checkpoint="abc", seed=3)
    d = rep.to_dict()
    assert set(d["recall"]) == {"@1", "@5", "@10", "@20"}
    assert d["checkpoint"] == "abc" and d["seed"] == 3
    assert d["query_kind"] == "text" and d["candidate_kind"] == "text"
