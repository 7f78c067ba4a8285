"""Dense retrieval and cross-encoder reranking on top of an elastic encoder.

Queries are encoded at whatever level the scheduler picks; passages are
always encoded with the largest structure, so the index keeps exactly one
vector per passage.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import CLS, SEP, Passage, RetrievalTask, lexical_overlap_negatives, pad_batch, with_cls
from .errors import ContractError, ShapeError
from .model import SLICED, ActiveStructure, ElasticModel
from .numerics import Tensor


class TruncationWarning(UserWarning):
    """A query-passage pair was cut to fit the maximum sequence length."""


@dataclass
class RetrievalExample:
    query: np.ndarray
    positive: Passage
    negatives: list[Passage]

    def __post_init__(self):
        if any(n.pid == self.positive.pid for n in self.negatives):
            raise ContractError("a negative passage equals the positive")


@dataclass
class PassageIndex:
    """One largest-structure [CLS] vector per passage id."""

    ids: np.ndarray
    vectors: np.ndarray
    _pos: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(set(self.ids.tolist())) != len(self.ids):
            raise ContractError("passage index holds duplicate ids")
        if self.vectors.shape[0] != len(self.ids):
            raise ShapeError("index ids and vectors disagree in length")
        self._pos = {int(p): i for i, p in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def vector(self, pid: int) -> np.ndarray:
        return self.vectors[self._pos[int(pid)]]

    def search(self, q_vecs: np.ndarray, k: int | None = None) -> np.ndarray:
        """Exhaustive dot-product ranking; returns passage ids, best first."""
        scores = np.atleast_2d(q_vecs) @ self.vectors.T
        order = np.argsort(-scores, axis=1, kind="stable")
        if k is not None:
            order = order[:, :k]
        return self.ids[order]


# ---------------------------------------------------------------------------
# Encoders and similarities
# ---------------------------------------------------------------------------

def cls_vectors(model: ElasticModel, seqs: Sequence[np.ndarray], level=None) -> Tensor:
    """[CLS] hidden states (batch, d) of CLS-prefixed sequences."""
    tokens, mask = pad_batch([with_cls(s) for s in seqs])
    return model.forward(tokens, level, SLICED, attention_mask=mask).cls


def encode_query(model: ElasticModel, query: np.ndarray, level=None) -> np.ndarray:
    with nx.no_grad():
        return cls_vectors(model, [query], level).data[0].copy()


def encode_passage(model: ElasticModel, passage) -> np.ndarray:
    tokens = passage.tokens if isinstance(passage, Passage) else passage
    with nx.no_grad():
        return cls_vectors(model, [tokens], model.submap.largest.level).data[0].copy()


def build_index(model: ElasticModel, passages: Sequence[Passage], batch_size: int = 64) -> PassageIndex:
    largest = model.submap.largest.level
    vecs = []
    with nx.no_grad():
        for start in range(0, len(passages), batch_size):
            chunk = passages[start : start + batch_size]
            vecs.append(cls_vectors(model, [p.tokens for p in chunk], largest).data)
    dim = model.config.d_model
    return PassageIndex(np.array([p.pid for p in passages]),
                        np.concatenate(vecs) if vecs else np.zeros((0, dim)))


def sim_dense(q_vec, p_vec) -> float:
    q, p = np.asarray(q_vec, dtype=float), np.asarray(p_vec, dtype=float)
    if q.shape != p.shape:
        raise ShapeError(f"similarity needs equal dims, got {q.shape} and {p.shape}")
    return float(q @ p)


def nll_from_scores(scores: Tensor, positive_index) -> Tensor:
    """Mean of -log softmax(scores)[positive] over rows."""
    return nx.cross_entropy(scores, np.asarray(positive_index))


def _batch_passages(examples: Sequence[RetrievalExample]) -> tuple[list[Passage], np.ndarray]:
    passages: list[Passage] = []
    seen: dict[int, int] = {}
    positives = np.empty(len(examples), dtype=np.int64)
    for i, ex in enumerate(examples):
        for j, p in enumerate([ex.positive, *ex.negatives]):
            if p.pid not in seen:
                seen[p.pid] = len(passages)
                passages.append(p)
            if j == 0:
                positives[i] = seen[p.pid]
    return passages, positives


def inbatch_nll(examples: Sequence[RetrievalExample], model: ElasticModel, level=None,
                passage_vectors: Tensor | None = None) -> Tensor:
    """In-batch negative log-likelihood of each query's positive passage.

    Every distinct passage in the batch (all positives and hard negatives)
    is a candidate for every query. ``passage_vectors`` may carry
    precomputed largest-structure encodings of those passages.
    """
    if not examples:
        raise ContractError("empty retrieval batch")
    passages, positives = _batch_passages(examples)
    if passage_vectors is None:
        passage_vectors = cls_vectors(model, [p.tokens for p in passages], model.submap.largest.level)
    q = cls_vectors(model, [ex.query for ex in examples], level)
    return nll_from_scores(q @ nx.transpose(passage_vectors), positives)


def concat_pair(query: np.ndarray, passage: np.ndarray, max_len: int) -> tuple[np.ndarray, bool]:
    seq = np.concatenate([[CLS], query, [SEP], passage]).astype(np.int64)
    if len(seq) > max_len:
        return seq[:max_len], True
    return seq, False


def _pair_batch(model: ElasticModel, pairs):
    seqs, truncated = [], 0
    for q, p in pairs:
        s, cut = concat_pair(q, p.tokens if isinstance(p, Passage) else p, model.config.max_len)
        seqs.append(s)
        truncated += cut
    if truncated:
        warnings.warn(f"{truncated} query-passage pair(s) truncated to {model.config.max_len} tokens",
                      TruncationWarning, stacklevel=3)
    return pad_batch(seqs)


def rerank_scores(model: ElasticModel, pairs, level=None) -> Tensor:
    """w . [CLS] of each cross-encoded (query, passage) pair."""
    tokens, mask = _pair_batch(model, pairs)
    out = model.forward(tokens, level, SLICED, attention_mask=mask)
    return model.rank_score(out.cls)


def sim_rerank(model: ElasticModel, query, passage, level=None, w=None) -> float:
    with nx.no_grad():
        tokens, mask = _pair_batch(model, [(query, passage)])
        cls = model.forward(tokens, level, SLICED, attention_mask=mask).cls.data[0]
    w = model.params["rank.w"].data if w is None else np.asarray(w, dtype=float)
    return float(w @ cls)


def rerank_nll(examples: Sequence[RetrievalExample], model: ElasticModel, level=None) -> Tensor:
    """Localized NLL: each query's positive against its own mined negatives."""
    if not examples:
        raise ContractError("empty rerank batch")
    m = 1 + len(examples[0].negatives)
    if any(1 + len(ex.negatives) != m for ex in examples):
        raise ContractError("every rerank group needs the same number of negatives")
    pairs = [(ex.query, p) for ex in examples for p in [ex.positive, *ex.negatives]]
    scores = nx.reshape(rerank_scores(model, pairs, level), (len(examples), m))
    return nll_from_scores(scores, np.zeros(len(examples), dtype=np.int64))


# ---------------------------------------------------------------------------
# Negative mining and evaluation
# ---------------------------------------------------------------------------

def mine_localized_negatives(
    retriever_run: dict,
    positives: dict,
    k_top: int,
    m_minus_1: int,
    seed: int = 0,
    report: list[str] | None = None,
) -> dict:
    """Sample ``m_minus_1`` false positives uniformly from each query's top ``k_top``.

    ``retriever_run`` maps query id to a ranked list of passage ids and
    ``positives`` maps query id to its positive id (or a set of ids).
    """
    rng = np.random.default_rng(seed)
    mined = {}
    for qid in sorted(retriever_run):
        pos = positives[qid]
        pos = {pos} if np.isscalar(pos) else set(pos)
        candidates = [p for p in retriever_run[qid] if p not in pos][:k_top]
        if len(candidates) < m_minus_1:
            if report is not None:
                report.append(f"query {qid}: only {len(candidates)} candidates for {m_minus_1} negatives")
            mined[qid] = list(candidates)
            continue
        if len(candidates) == m_minus_1:
            mined[qid] = list(candidates)
            continue
        pick = rng.choice(len(candidates), size=m_minus_1, replace=False)
        mined[qid] = [candidates[i] for i in sorted(pick)]
    return mined


def ranking_metrics(ranked: np.ndarray, positives: Sequence[int], k_list: Sequence[int]) -> dict:
    """Recall@k and MRR@k of ranked id lists against one positive id per query."""
    ranked = np.asarray(ranked)
    positives = np.asarray(positives)
    hit = ranked == positives[:, None]
    has = hit.any(axis=1)
    rank = np.where(has, hit.argmax(axis=1) + 1, np.iinfo(np.int64).max)
    out = {}
    for k in k_list:
        out[f"recall@{k}"] = float((rank <= k).mean())
        out[f"mrr@{k}"] = float(np.where(rank <= k, 1.0 / np.minimum(rank, 10**12), 0.0).mean())
    return out


def encode_queries(model: ElasticModel, queries: Sequence[np.ndarray], level=None, batch_size: int = 64) -> np.ndarray:
    with nx.no_grad():
        return np.concatenate([cls_vectors(model, queries[i : i + batch_size], level).data
                               for i in range(0, len(queries), batch_size)])


def evaluate_retrieval(model: ElasticModel, index: PassageIndex, queries: Sequence[tuple[np.ndarray, int]],
                       levels=None, k_list: Sequence[int] = (1, 5, 20)) -> dict:
    """Recall@k / MRR@k per query level under exhaustive dot-product search."""
    levels = model.submap.levels if levels is None else levels
    tokens = [q for q, _ in queries]
    positives = [pid for _, pid in queries]
    results = {}
    for level in levels:
        ranked = index.search(encode_queries(model, tokens, level))
        results[level] = ranking_metrics(ranked, positives, k_list)
    return results


def retrieve(model: ElasticModel, index: PassageIndex, queries: Sequence[np.ndarray], level=None,
             depth: int = 20) -> np.ndarray:
    return index.search(encode_queries(model, queries, level), depth)


def rerank(model: ElasticModel, queries: Sequence[np.ndarray], candidates: np.ndarray,
           passages: dict[int, Passage], level=None) -> np.ndarray:
    """Reorder each query's candidate ids by cross-encoder score."""
    out = np.empty_like(candidates)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        with nx.no_grad():
            for i, (q, row) in enumerate(zip(queries, candidates)):
                scores = rerank_scores(model, [(q, passages[int(p)]) for p in row], level).data
                out[i] = row[np.argsort(-scores, kind="stable")]
    return out


def pipeline_grid(retriever: ElasticModel, reranker: ElasticModel, index: PassageIndex,
                  passages: dict[int, Passage], queries: Sequence[tuple[np.ndarray, int]],
                  retriever_levels=None, reranker_levels=None, depth: int = 10, k: int = 10) -> dict:
    """MRR@k for every (retriever level, reranker level) combination."""
    retriever_levels = retriever.submap.levels if retriever_levels is None else retriever_levels
    reranker_levels = reranker.submap.levels if reranker_levels is None else reranker_levels
    tokens = [q for q, _ in queries]
    positives = [pid for _, pid in queries]
    grid = {}
    for rl in retriever_levels:
        candidates = retrieve(retriever, index, tokens, rl, depth)
        for kl in reranker_levels:
            ranked = rerank(reranker, tokens, candidates, passages, kl)
            grid[(rl, kl)] = ranking_metrics(ranked, positives, [k])[f"mrr@{k}"]
    return grid


# ---------------------------------------------------------------------------
# Finetuning objectives
# ---------------------------------------------------------------------------

class _PoolTask:
    """Training pool of synthetic passages with distinct-marker batch sampling."""

    def __init__(self, task: RetrievalTask, pool_size: int):
        self.task = task
        self.pool = task.corpus(pool_size, start_pid=1_000_000)
        self.by_pid = {p.pid: p for p in self.pool}
        self.by_marker: dict[int, list[Passage]] = {}
        for p in self.pool:
            self.by_marker.setdefault(p.marker, []).append(p)

    def sample_positives(self, count: int, rng: np.random.Generator) -> list[Passage]:
        markers = rng.choice(sorted(self.by_marker), size=count, replace=False)
        return [self.by_marker[int(m)][int(rng.integers(len(self.by_marker[int(m)])))] for m in markers]

    def same_marker(self, p: Passage) -> set[int]:
        return {q.pid for q in self.by_marker[p.marker]}


class DenseObjective:
    """In-batch NLL with lexical-overlap hard negatives (ElasticDenser)."""

    name = "dense"
    param_prefixes = ("mlm.", "rel.", "cls.", "rank.")
    per_structure_backward = False

    def __init__(self, task: RetrievalTask, pool_size: int = 1024, hard_negatives: int = 1,
                 lexical_depth: int = 8):
        self.pool = _PoolTask(task, pool_size)
        self.hard_negatives = hard_negatives
        self.lexical_depth = lexical_depth

    def sample(self, task_data, batch_size: int, rng: np.random.Generator) -> list[RetrievalExample]:
        examples = []
        for pos in self.pool.sample_positives(batch_size, rng):
            query = self.pool.task.query(pos)
            negs: list[Passage] = []
            if self.hard_negatives:
                ranked = lexical_overlap_negatives(query, self.pool.pool, pos.pid, self.lexical_depth,
                                                   exclude=self.pool.same_marker(pos))
                pick = rng.choice(len(ranked), size=min(self.hard_negatives, len(ranked)), replace=False)
                negs = [self.pool.by_pid[ranked[i]] for i in sorted(pick)]
            examples.append(RetrievalExample(query, pos, negs))
        return examples

    def prepare(self, model: ElasticModel, batch):
        passages, _ = _batch_passages(batch)
        return cls_vectors(model, [p.tokens for p in passages], model.submap.largest.level)

    def loss(self, handle: ActiveStructure, batch, shared) -> Tensor:
        return inbatch_nll(batch, handle.model, handle.structure, passage_vectors=shared)


class RerankObjective:
    """Localized contrastive estimation over retriever false positives (ElasticRanker)."""

    name = "rerank"
    param_prefixes = ("mlm.", "rel.", "cls.")
    per_structure_backward = True

    def __init__(self, task: RetrievalTask, retriever: ElasticModel | None = None, pool_size: int = 512,
                 n_queries: int = 256, negatives: int = 3, k_top: int = 8):
        self.pool = _PoolTask(task, pool_size)
        self.negatives = negatives
        self.k_top = k_top
        rng = np.random.default_rng(0)
        picks = self.pool.sample_positives(min(n_queries, len(self.pool.by_marker)), rng)
        self.queries = {i: (task.query(p), p) for i, p in enumerate(picks)}
        if retriever is not None:
            index = build_index(retriever, self.pool.pool)
            ranked = retrieve(retriever, index, [q for q, _ in self.queries.values()],
                              retriever.submap.largest.level, depth=k_top + 16)
            run = {qid: list(map(int, ranked[i])) for i, qid in enumerate(self.queries)}
        else:
            run = {qid: lexical_overlap_negatives(q, self.pool.pool, p.pid, k_top + 16)
                   for qid, (q, p) in self.queries.items()}
        self.run = {qid: [pid for pid in run[qid] if pid not in self.pool.same_marker(self.queries[qid][1])]
                    for qid in run}
        self.positives = {qid: p.pid for qid, (_, p) in self.queries.items()}

    def sample(self, task_data, batch_size: int, rng: np.random.Generator) -> list[RetrievalExample]:
        qids = rng.choice(sorted(self.queries), size=batch_size, replace=False)
        sub_run = {int(q): self.run[int(q)] for q in qids}
        mined = mine_localized_negatives(sub_run, self.positives, self.k_top, self.negatives,
                                         seed=int(rng.integers(2**31)))
        return [RetrievalExample(self.queries[int(q)][0], self.queries[int(q)][1],
                                 [self.pool.by_pid[pid] for pid in mined[int(q)]]) for q in qids]

    def loss(self, handle: ActiveStructure, batch) -> Tensor:
        return rerank_nll(batch, handle.model, handle.structure)
