"""Desk-scale pipeline stages shared by the command line and the test suite.

Each stage takes in-memory objects and a :class:`RunConfig`; the command
line wraps them with checkpoint and run-directory handling.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data
from . import distill as D
from . import pruning
from . import retrieval as R
from .errors import ConfigError
from .model import ElasticModel, ModelConfig, Submap, compact
from .simulator import WorkloadSpec

# Synthetic latency table standing in for a calibrated CPU profile: the
# largest level cannot keep up with peak load (about 50 requests/s).
SYNTHETIC_LATENCY_MS = {50: 40.0, 40: 33.0, 30: 26.0, 20: 19.0, 15: 15.0, 10: 11.0, 5: 7.0}
SYNTHETIC_PROXY = {50: 0.90, 40: 0.88, 30: 0.85, 20: 0.80, 15: 0.76, 10: 0.70, 5: 0.60}

FINETUNE_DEFAULTS = {
    "dense": dict(steps_per_epoch=400, learning_rate=2e-3, batch_size=32, warmup_proportion=0.1),
    "rerank": dict(steps_per_epoch=40, learning_rate=1e-3, batch_size=8, warmup_proportion=0.1),
    "classification": dict(steps_per_epoch=100, learning_rate=1e-3, batch_size=32, warmup_proportion=0.1),
}


def _train(**overrides) -> D.DistillConfig:
    return D.DistillConfig(**overrides)


@dataclass
class RetrievalSetup:
    task_seed: int = 0
    eval_seed: int = 99
    eval_passages: int = 128
    pool_size: int = 1024
    hard_negatives: int = 1
    rerank_negatives: int = 3
    rerank_queries: int = 128
    k_list: tuple = (1, 5, 20)
    proxy_metric: str = "recall@5"
    grid_depth: int = 10
    grid_queries: int = 32


@dataclass
class RunConfig:
    seed: int = 0
    corpus_bytes: int = 1 << 20
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: D.DistillConfig = field(default_factory=lambda: _train(steps_per_epoch=300))
    distill: D.DistillConfig = field(default_factory=lambda: _train(steps_per_epoch=150))
    finetune: dict = field(default_factory=lambda: {k: _train(**v) for k, v in FINETUNE_DEFAULTS.items()})
    levels: tuple = pruning.PRESERVING_LEVELS
    score_batches: int = 8
    retrieval: RetrievalSetup = field(default_factory=RetrievalSetup)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    constraints_ms: tuple = (250.0, 375.0, 500.0)
    calibration_trials: int = 10
    calibration_length: int = 16

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "corpus_bytes": self.corpus_bytes,
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "distill": self.distill.to_dict(),
            "finetune": {k: v.to_dict() for k, v in self.finetune.items()},
            "levels": list(self.levels),
            "score_batches": self.score_batches,
            "retrieval": {**dataclasses.asdict(self.retrieval), "k_list": list(self.retrieval.k_list)},
            "workload": self.workload.to_dict(),
            "constraints_ms": list(self.constraints_ms),
            "calibration_trials": self.calibration_trials,
            "calibration_length": self.calibration_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        base = cls().to_dict()
        merged = _merge(base, d)
        try:
            return cls(
                seed=int(merged["seed"]),
                corpus_bytes=int(merged["corpus_bytes"]),
                model=ModelConfig.from_dict(merged["model"]),
                pretrain=D.DistillConfig(**merged["pretrain"]),
                distill=D.DistillConfig(**merged["distill"]),
                finetune={k: D.DistillConfig(**v) for k, v in merged["finetune"].items()},
                levels=tuple(merged["levels"]),
                score_batches=int(merged["score_batches"]),
                retrieval=RetrievalSetup(**{**merged["retrieval"], "k_list": tuple(merged["retrieval"]["k_list"])}),
                workload=WorkloadSpec.from_dict(merged["workload"]),
                constraints_ms=tuple(float(t) for t in merged["constraints_ms"]),
                calibration_trials=int(merged["calibration_trials"]),
                calibration_length=int(merged["calibration_length"]),
            )
        except TypeError as exc:
            raise ConfigError(f"bad configuration: {exc}") from exc

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        d = json.loads(Path(path).read_text()) if path is not None else {}
        for item in overrides or []:
            key, value = parse_override(item)
            _set_path(d, key, value)
        return cls.from_dict(d)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        d = self.to_dict()
        for item in overrides:
            key, value = parse_override(item)
            _set_path(d, key, value)
        return RunConfig.from_dict(d)


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if k not in out:
            raise ConfigError(f"unknown configuration key {k!r}")
        if isinstance(v, dict) and isinstance(out[k], dict) and k != "finetune":
            out[k] = _merge(out[k], v)
        elif k == "finetune":
            for name, sub in v.items():
                out[k][name] = {**out[k].get(name, {}), **sub}
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple[str, object]:
    """``a.b=value`` with value parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _set_path(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def version_stamp() -> str:
    from . import __version__

    try:
        described = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                                   capture_output=True, text=True, timeout=5)
        rev = described.stdout.strip() if described.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        rev = "unknown"
    return f"elasticlm {__version__} ({rev})"


def prepare_run_dir(out_dir, config: RunConfig, command: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, "version": version_stamp(), "config": config.to_dict()}
    (out / f"resolved_config.{command}.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    (out / "VERSION").write_text(echo["version"] + "\n")
    return out


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def load_corpus(config: RunConfig, path=None) -> data.CorpusSplit:
    return data.split_corpus(data.fixture_corpus(path, config.corpus_bytes, config.seed))


def train_teacher(config: RunConfig, corpus: data.CorpusSplit, trace=None):
    return D.pretrain_teacher(corpus, config.pretrain, config.model, trace)


def score_teacher(teacher: ElasticModel, corpus: data.CorpusSplit, config: RunConfig):
    """Expressive scores on train windows, then the nested submap."""
    rng = np.random.default_rng(config.seed + 1)
    batches = [data.sample_windows(corpus.train, config.pretrain.batch_size, config.pretrain.seq_len, rng)
               for _ in range(config.score_batches)]
    raw = pruning.record_scores(teacher, batches, mask_rate=config.pretrain.mask_rate, seed=config.seed)
    scores = pruning.normalize_scores(raw)
    report: list[str] = []
    submap = pruning.derive_submap(scores, config.levels, report)
    return scores, submap, report


def distill_student(teacher: ElasticModel, submap: Submap, corpus: data.CorpusSplit, config: RunConfig,
                    trace=None):
    student = compact(teacher.with_submap(submap), submap, seed=config.seed)
    return D.distill(teacher, student, corpus, config.distill, trace)


def make_objective(name: str, config: RunConfig, retriever: ElasticModel | None = None):
    r = config.retrieval
    task = data.RetrievalTask(seed=r.task_seed)
    if name == "dense":
        return R.DenseObjective(task, pool_size=r.pool_size, hard_negatives=r.hard_negatives), None
    if name == "rerank":
        return R.RerankObjective(task, retriever=retriever, pool_size=min(r.pool_size, 512),
                                 n_queries=r.rerank_queries, negatives=r.rerank_negatives), None
    if name == "classification":
        return D.ClassificationObjective(), data.ClassificationTask(seed=config.seed)
    raise ConfigError(f"unknown objective {name!r}")


def finetune_student(student: ElasticModel, objective: str, config: RunConfig,
                     retriever: ElasticModel | None = None, trace=None):
    obj, task_data = make_objective(objective, config, retriever)
    tuned = student.copy()
    return D.finetune(tuned, task_data, obj, None, config.finetune[objective], trace)


def retrieval_eval_set(config: RunConfig):
    """Held-out passages (disjoint generator seed) and one query per passage."""
    task = data.RetrievalTask(seed=config.retrieval.eval_seed)
    passages = task.corpus(config.retrieval.eval_passages)
    queries = [(task.query(p), p.pid) for p in passages]
    return passages, queries


def eval_retrieval(model: ElasticModel, config: RunConfig, index: R.PassageIndex | None = None):
    passages, queries = retrieval_eval_set(config)
    index = index if index is not None else R.build_index(model, passages)
    metrics = R.evaluate_retrieval(model, index, queries, k_list=config.retrieval.k_list)
    return index, metrics


def proxies_from_metrics(metrics: dict, key: str = "recall@5") -> dict:
    return {level: float(m[key]) for level, m in metrics.items()}


def grid(retriever: ElasticModel, reranker: ElasticModel, config: RunConfig, index=None) -> dict:
    passages, queries = retrieval_eval_set(config)
    index = index if index is not None else R.build_index(retriever, passages)
    by_pid = {p.pid: p for p in passages}
    return R.pipeline_grid(retriever, reranker, index, by_pid, queries[: config.retrieval.grid_queries],
                           depth=config.retrieval.grid_depth, k=config.retrieval.grid_depth)
