"""Teacher pretraining, elastic distillation and elastic finetuning.

Every optimisation step visits each structure of the submap in order,
scales its loss by ``1 / len(submap)``, accumulates the gradients into the
shared parameter store and then applies one optimizer update.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, IO, Sequence

import numpy as np

from . import numerics as nx
from .data import CorpusSplit, fixed_windows, mask_tokens, pad_batch, sample_windows
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .model import SLICED, ActiveStructure, ElasticModel, ModelConfig, RelationTriple, Submap
from .numerics import Tensor


@dataclass
class DistillConfig:
    batch_size: int = 16
    seq_len: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 1
    steps_per_epoch: int = 200
    warmup_proportion: float = 0.01
    clip_norm: float = 5.0
    seed: int = 0
    levels: tuple[float, ...] | None = None
    loss_scaling: str = "mean"
    mask_rate: float = 0.15

    def __post_init__(self):
        if not 0.0 <= self.warmup_proportion < 1.0:
            raise ConfigError("warmup_proportion must lie in [0, 1)")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.loss_scaling not in ("mean", "sum"):
            raise ConfigError(f"unknown loss_scaling {self.loss_scaling!r}")
        if self.levels is not None:
            self.levels = tuple(self.levels)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels) if self.levels is not None else None
        return d


# ---------------------------------------------------------------------------
# Optimisation plumbing
# ---------------------------------------------------------------------------

def _decays(name: str) -> bool:
    tail = name.rsplit(".", 1)[-1]
    return not (tail.startswith("b") or tail.endswith("_g") or tail.endswith("_b"))


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Linear warmup over ``warmup_steps`` then linear decay to zero at
    ``total_steps``. Biases and layer-norm parameters are not decayed.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 total_steps: int = 1, warmup_steps: int = 0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.total_steps = max(1, total_steps)
        self.warmup_steps = warmup_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        step = self.t + 1
        if self.warmup_steps and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        return self.lr * max(0.0, 1.0 - (step - self.warmup_steps) / span)

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and _decays(name):
                update = update + self.weight_decay * p.data
            p.data -= lr * update


def make_optimizer(model: ElasticModel, config: DistillConfig, trainable: Callable[[str], bool] | None = None) -> AdamW:
    params = {k: p for k, p in model.params.items() if trainable is None or trainable(k)}
    return AdamW(params, config.learning_rate, config.weight_decay, config.total_steps,
                 int(round(config.warmup_proportion * config.total_steps)))


def global_grad_norm(params: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class TrainingTrace:
    """Per (step, level) loss records plus per-step gradient norm and timing."""

    records: list[dict] = field(default_factory=list)
    sink: IO[str] | None = None
    notes: dict = field(default_factory=dict)

    def log(self, **record) -> None:
        self.records.append(record)
        if self.sink is not None:
            self.sink.write(json.dumps(record) + "\n")
            self.sink.flush()

    def losses(self, level=None) -> list[float]:
        return [r["loss"] for r in self.records if level is None or r.get("level") == level]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


@dataclass
class StepResult:
    losses: dict
    grad_norm: float
    skipped: bool


def traverse_step(
    model: ElasticModel,
    submap: Submap,
    loss_fn: Callable[[ActiveStructure], Tensor],
    optimizer: AdamW | None,
    clip_norm: float | None = None,
    scaling: str = "mean",
    per_structure_backward: bool = True,
) -> StepResult:
    """One elastic optimisation step over every structure of ``submap``.

    With ``per_structure_backward`` each scaled loss is back-propagated as
    soon as it is computed; otherwise the scaled losses are summed and
    back-propagated once (same gradients, useful when structures share a
    sub-graph). A non-finite gradient skips the update.
    """
    model.zero_grad()
    scale = 1.0 / len(submap) if scaling == "mean" else 1.0
    losses = {}
    total = None
    finite = True
    for structure in submap:
        loss = loss_fn(ActiveStructure(model, structure))
        value = loss.item()
        losses[structure.level] = value
        if not math.isfinite(value):
            finite = False
            continue
        scaled = loss * scale
        if per_structure_backward:
            nx.backward(scaled)
        else:
            total = scaled if total is None else total + scaled
    if total is not None and finite:
        nx.backward(total)

    params = [p for p in (optimizer.params.values() if optimizer else model.params.values())]
    norm = global_grad_norm(params) if finite else math.nan
    if not math.isfinite(norm):
        model.zero_grad()
        return StepResult(losses, norm, True)
    if clip_norm is not None:
        clip_grad_norm(params, clip_norm)
    if optimizer is not None:
        optimizer.step()
    return StepResult(losses, norm, False)


# ---------------------------------------------------------------------------
# Relation alignment
# ---------------------------------------------------------------------------

def align_loss(teacher: RelationTriple, student: RelationTriple) -> Tensor:
    """Sum over relation heads of KL(teacher || student) for Q, K and V relations.

    KL is summed over each row's entries and averaged over rows (and
    batch); teacher relations are detached.
    """
    total = None
    for t, s in zip(teacher, student):
        if t.shape != s.shape:
            raise ContractError(f"relation shapes differ: {t.shape} vs {s.shape}")
        heads = t.shape[-3]
        # kl_div averages over all rows, i.e. over heads too; multiply back to sum heads.
        term = nx.kl_div(t.detach(), s) * heads
        total = term if total is None else total + term
    return total


def elastic_step(teacher: ElasticModel, student: ElasticModel, batch: np.ndarray, submap: Submap,
                 optimizer: AdamW | None, clip_norm: float | None = None,
                 scaling: str = "mean") -> StepResult:
    """Distil every structure of ``submap`` against the frozen teacher on ``batch``."""
    with nx.no_grad():
        r_t = teacher.teacher_relations(batch).detach()
    return traverse_step(student, submap, lambda h: align_loss(r_t, h.relations(batch)),
                         optimizer, clip_norm, scaling)


def heldout_align_loss(teacher: ElasticModel, student: ElasticModel, windows: np.ndarray,
                       levels=None) -> dict:
    with nx.no_grad():
        r_t = teacher.teacher_relations(windows)
        levels = student.submap.levels if levels is None else levels
        return {lv: align_loss(r_t, student.select(lv).relations(windows)).item() for lv in levels}


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def heldout_mlm_loss(model: ElasticModel, windows: np.ndarray, mask_rate: float = 0.15,
                     seed: int = 1234, level=None) -> float:
    inputs, targets = mask_tokens(windows, mask_rate, np.random.default_rng(seed))
    with nx.no_grad():
        out = model.forward(inputs, level, SLICED)
        return nx.cross_entropy(model.mlm_logits(out.hidden), targets).item()


def pretrain_teacher(corpus: CorpusSplit, config: DistillConfig, model_config: ModelConfig | None = None,
                     trace: TrainingTrace | None = None, heldout_windows: int = 64) -> tuple[ElasticModel, TrainingTrace]:
    """Masked-language-model pretraining of a full-structure teacher."""
    model_config = model_config or ModelConfig()
    if corpus.train.max() >= model_config.vocab_size:
        raise ShapeError("corpus is not tokenizable under the configured vocabulary")
    trace = trace if trace is not None else TrainingTrace()
    rng = np.random.default_rng(config.seed)
    teacher = ElasticModel.init(model_config, seed=config.seed)
    heldout = fixed_windows(corpus.heldout, heldout_windows, config.seq_len)
    trace.notes["heldout_before"] = heldout_mlm_loss(teacher, heldout, config.mask_rate)
    opt = make_optimizer(teacher, config, lambda k: not k.startswith(("rel.", "cls.", "rank.")))
    for step in range(config.total_steps):
        t0 = time.perf_counter()
        windows = sample_windows(corpus.train, config.batch_size, config.seq_len, rng)
        inputs, targets = mask_tokens(windows, config.mask_rate, rng)
        teacher.zero_grad()
        out = teacher.forward(inputs)
        loss = nx.cross_entropy(teacher.mlm_logits(out.hidden), targets)
        if not math.isfinite(loss.item()):
            err = NumericError(f"teacher pretraining diverged at step {step}")
            err.trace = trace
            raise err
        nx.backward(loss)
        norm = clip_grad_norm(list(opt.params.values()), config.clip_norm)
        opt.step()
        trace.log(step=step, level=teacher.submap.largest.level, loss=loss.item(), grad_norm=norm,
                  millis=1000 * (time.perf_counter() - t0))
    trace.notes["heldout_after"] = heldout_mlm_loss(teacher, heldout, config.mask_rate)
    return teacher, trace


def distill(teacher: ElasticModel, student: ElasticModel, corpus: CorpusSplit, config: DistillConfig,
            trace: TrainingTrace | None = None, heldout_windows: int = 32) -> tuple[ElasticModel, TrainingTrace]:
    """Task-agnostic relation distillation over every structure of the student's submap."""
    trace = trace if trace is not None else TrainingTrace()
    submap = student.submap if config.levels is None else student.submap.restrict(config.levels)
    rng = np.random.default_rng(config.seed)
    heldout = fixed_windows(corpus.heldout, heldout_windows, config.seq_len)
    trace.notes["heldout_before"] = heldout_align_loss(teacher, student, heldout, submap.levels)
    opt = make_optimizer(student, config, lambda k: not k.startswith(("mlm.", "cls.", "rank.")))
    for step in range(config.total_steps):
        t0 = time.perf_counter()
        batch = sample_windows(corpus.train, config.batch_size, config.seq_len, rng)
        result = elastic_step(teacher, student, batch, submap, opt, config.clip_norm, config.loss_scaling)
        millis = 1000 * (time.perf_counter() - t0)
        for level, value in result.losses.items():
            trace.log(step=step, level=level, loss=value, grad_norm=result.grad_norm,
                      millis=millis, skipped=result.skipped)
    trace.notes["heldout_after"] = heldout_align_loss(teacher, student, heldout, submap.levels)
    return student, trace


# ---------------------------------------------------------------------------
# Task-specific finetuning
# ---------------------------------------------------------------------------

class ClassificationObjective:
    """Cross-entropy of the classification head on the [CLS] vector."""

    name = "classification"
    param_prefixes = ("mlm.", "rel.", "rank.")
    per_structure_backward = True

    def sample(self, task, batch_size: int, rng: np.random.Generator):
        seqs, labels = task.sample(batch_size)
        tokens, mask = pad_batch(seqs)
        return tokens, mask, labels

    def loss(self, handle: ActiveStructure, batch) -> Tensor:
        tokens, mask, labels = batch
        out = handle.forward(tokens, attention_mask=mask)
        return nx.cross_entropy(handle.model.class_logits(out.cls), labels)


def finetune(student: ElasticModel, task_data, objective, submap: Submap | None,
             config: DistillConfig, trace: TrainingTrace | None = None) -> tuple[ElasticModel, TrainingTrace]:
    """Elastic finetuning: the same traversal discipline with a task loss.

    ``objective`` provides ``sample(task_data, batch_size, rng)``,
    ``loss(handle, batch)`` and optionally ``prepare(model, batch)``
    returning shared state passed as ``loss(handle, batch, shared)``.
    """
    trace = trace if trace is not None else TrainingTrace()
    submap = submap if submap is not None else student.submap
    if config.levels is not None:
        submap = submap.restrict(config.levels)
    rng = np.random.default_rng(config.seed)
    skip = getattr(objective, "param_prefixes", ())
    opt = make_optimizer(student, config, lambda k: not k.startswith(skip))
    for step in range(config.total_steps):
        t0 = time.perf_counter()
        batch = objective.sample(task_data, config.batch_size, rng)
        prepare = getattr(objective, "prepare", None)
        if prepare is not None:
            shared = prepare(student, batch)
            fn = lambda h, b=batch, s=shared: objective.loss(h, b, s)  # noqa: E731
        else:
            fn = lambda h, b=batch: objective.loss(h, b)  # noqa: E731
        result = traverse_step(student, submap, fn, opt, config.clip_norm, config.loss_scaling,
                               getattr(objective, "per_structure_backward", True))
        millis = 1000 * (time.perf_counter() - t0)
        for level, value in result.losses.items():
            trace.log(step=step, level=level, loss=value, grad_norm=result.grad_norm,
                      millis=millis, skipped=result.skipped)
    return student, trace


def classification_accuracy(model: ElasticModel, seqs, labels, level=None) -> float:
    tokens, mask = pad_batch(seqs)
    with nx.no_grad():
        out = model.forward(tokens, level, SLICED, attention_mask=mask)
        pred = model.class_logits(out.cls).data.argmax(axis=-1)
    return float((pred == np.asarray(labels)).mean())
