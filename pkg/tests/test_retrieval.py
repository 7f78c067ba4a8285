import warnings

import numpy as np
import pytest
from scipy import special

from conftest import TINY, random_submap
from elasticlm import data
from elasticlm import distill as D
from elasticlm import numerics as nx
from elasticlm import retrieval as R
from elasticlm.errors import ContractError, ShapeError
from elasticlm.model import ElasticModel


@pytest.fixture
def task():
    return data.RetrievalTask(seed=4, n_words=20, passage_words=2, query_words=1)


@pytest.fixture
def examples(task):
    passages = task.corpus(8)
    return [R.RetrievalExample(task.query(p), p, [passages[(i + 3) % 8]]) for i, p in enumerate(passages[:4])]


def _cls(model, seqs, level):
    with nx.no_grad():
        return R.cls_vectors(model, seqs, level).data


def test_inbatch_nll_matches_numpy(tiny_model, examples):
    passages = []
    for ex in examples:
        for p in [ex.positive, *ex.negatives]:
            if p.pid not in [q.pid for q in passages]:
                passages.append(p)
    pv = _cls(tiny_model, [p.tokens for p in passages], 50)
    qv = _cls(tiny_model, [ex.query for ex in examples], 20)
    logp = special.log_softmax(qv @ pv.T, axis=1)
    pos = [[p.pid for p in passages].index(ex.positive.pid) for ex in examples]
    expected = -np.mean(logp[np.arange(len(examples)), pos])
    got = R.inbatch_nll(examples, tiny_model, 20).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_inbatch_candidates_include_other_positives_and_negatives(examples):
    passages, positives = R._batch_passages(examples)
    assert len(passages) == len({p.pid for p in passages})
    assert {ex.positive.pid for ex in examples} <= {p.pid for p in passages}
    assert [passages[i].pid for i in positives] == [ex.positive.pid for ex in examples]


def test_grad_inbatch_nll(tiny_model, examples):
    err = nx.finite_diff_check(lambda: R.inbatch_nll(examples, tiny_model, 30), tiny_model.parameters(),
                               n_coords=60, seed=3)
    assert err < 1e-4


def test_grad_rerank_nll(tiny_model, examples):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", R.TruncationWarning)
        err = nx.finite_diff_check(lambda: R.rerank_nll(examples, tiny_model, 15), tiny_model.parameters(),
                                   n_coords=60, seed=4)
    assert err < 1e-4


def test_rerank_nll_matches_numpy(tiny_model, examples):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", R.TruncationWarning)
        scores = np.array([[R.sim_rerank(tiny_model, ex.query, p, 10) for p in [ex.positive, *ex.negatives]]
                           for ex in examples])
        got = R.rerank_nll(examples, tiny_model, 10).item()
    expected = -special.log_softmax(scores, axis=1)[:, 0].mean()
    assert got == pytest.approx(expected, rel=1e-10)


def test_identical_passages_score_identically(tiny_model, task):
    p = task.passage(0, 5)
    twin = data.Passage(1, p.tokens.copy(), 5)
    q = task.query(p)[:2]
    assert R.sim_dense(R.encode_query(tiny_model, q, 5), R.encode_passage(tiny_model, p)) == \
        R.sim_dense(R.encode_query(tiny_model, q, 5), R.encode_passage(tiny_model, twin))
    assert R.sim_rerank(tiny_model, q, p, 5) == pytest.approx(R.sim_rerank(tiny_model, q, twin, 5), abs=1e-13)


def test_passages_always_encoded_at_largest_level(tiny_model, task):
    passages = task.corpus(5)
    index = R.build_index(tiny_model, passages)
    full = _cls(tiny_model, [p.tokens for p in passages], tiny_model.submap.largest.level)
    np.testing.assert_allclose(index.vectors, full, atol=1e-12)
    np.testing.assert_allclose(index.vector(passages[2].pid), R.encode_passage(tiny_model, passages[2]),
                               atol=1e-12)


def test_sim_dense_shape_error():
    with pytest.raises(ShapeError):
        R.sim_dense(np.ones(3), np.ones(4))


def test_concat_pair_truncation(tiny_model):
    seq, cut = R.concat_pair(np.array([5, 6]), np.array([7] * 30), max_len=TINY.max_len)
    assert cut and len(seq) == TINY.max_len and seq[0] == data.CLS and seq[3] == data.SEP
    with pytest.warns(R.TruncationWarning):
        R.rerank_scores(tiny_model, [(np.array([5, 6]), np.array([7] * 30))])


def test_example_rejects_positive_as_negative(task):
    p = task.passage(0, 1)
    with pytest.raises(ContractError):
        R.RetrievalExample(task.query(p), p, [p])
    with pytest.raises(ContractError):
        R.inbatch_nll([], None)


def test_index_search_and_duplicates():
    index = R.PassageIndex(np.array([10, 20, 30]), np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    np.testing.assert_array_equal(index.search(np.array([1.0, 0.2])), [[30, 10, 20]])
    np.testing.assert_array_equal(index.search(np.array([[0.0, 1.0]]), k=1), [[20]])
    # 10 and 30 tie; the stable sort keeps insertion order.
    np.testing.assert_array_equal(index.search(np.array([1.0, 0.0])), [[10, 30, 20]])
    with pytest.raises(ContractError):
        R.PassageIndex(np.array([1, 1]), np.zeros((2, 2)))


def test_ranking_metrics_recount():
    ranked = np.array([[3, 1, 2], [5, 6, 4], [7, 8, 9]])
    positives = [1, 4, 0]
    m = R.ranking_metrics(ranked, positives, [1, 2, 3])
    assert m["recall@1"] == 0.0
    assert m["recall@2"] == pytest.approx(1 / 3)
    assert m["recall@3"] == pytest.approx(2 / 3)
    assert m["mrr@3"] == pytest.approx((1 / 2 + 1 / 3) / 3)
    assert m["mrr@1"] == 0.0


def test_mining_samples_false_positives_from_top_k():
    run = {0: [5, 1, 6, 7, 8, 9], 1: [2, 3]}
    report = []
    mined = R.mine_localized_negatives(run, {0: 1, 1: 2}, k_top=4, m_minus_1=2, seed=0, report=report)
    assert set(mined[0]) <= {5, 6, 7, 8} and len(set(mined[0])) == 2
    assert mined[1] == [3] and report
    again = R.mine_localized_negatives(run, {0: 1, 1: 2}, k_top=4, m_minus_1=2, seed=0)
    assert again == mined


def test_lexical_negatives_skip_positive_and_excluded(task):
    passages = task.corpus(30)
    q = task.query(passages[0])
    ranked = data.lexical_overlap_negatives(q, passages, passages[0].pid, 5, exclude={passages[1].pid})
    assert passages[0].pid not in ranked and passages[1].pid not in ranked and len(ranked) == 5


def test_dense_finetune_improves_recall():
    model = ElasticModel.init(TINY, seed=0).with_submap(random_submap(TINY, 1, (50, 20)))
    task = data.RetrievalTask(seed=0, n_words=20, passage_words=2, query_words=1)
    ev = data.RetrievalTask(seed=9, n_words=20, passage_words=2, query_words=1)
    passages = ev.corpus(32)
    queries = [(ev.query(p), p.pid) for p in passages]

    def recall():
        index = R.build_index(model, passages)
        return {lv: m["recall@5"] for lv, m in R.evaluate_retrieval(model, index, queries, k_list=(5,)).items()}

    before = recall()
    obj = R.DenseObjective(task, pool_size=256)
    cfg = D.DistillConfig(batch_size=16, steps_per_epoch=200, learning_rate=3e-3, warmup_proportion=0.1)
    model, trace = D.finetune(model, None, obj, None, cfg)
    assert np.mean(trace.losses(50)[-5:]) < np.mean(trace.losses(50)[:5])
    after = recall()
    assert after[50] >= 0.6
    assert all(after[lv] > before[lv] for lv in before)


def test_rerank_objective_and_grid(tiny_model):
    task = data.RetrievalTask(seed=0, n_words=20, passage_words=2, query_words=1)
    obj = R.RerankObjective(task, retriever=tiny_model, pool_size=128, n_queries=16, negatives=2, k_top=4)
    cfg = D.DistillConfig(batch_size=4, steps_per_epoch=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", R.TruncationWarning)
        reranker, trace = D.finetune(tiny_model.copy(), None, obj, None, cfg)
    assert len(trace.records) == 2 * len(tiny_model.submap)
    passages = task.corpus(12)
    queries = [(task.query(p), p.pid) for p in passages[:3]]
    index = R.build_index(tiny_model, passages)
    grid = R.pipeline_grid(tiny_model, reranker, index, {p.pid: p for p in passages}, queries, depth=4, k=4)
    assert len(grid) == len(tiny_model.submap) ** 2
    assert all(0.0 <= v <= 1.0 for v in grid.values())
