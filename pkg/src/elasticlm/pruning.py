"""Expressive scores and nested submap derivation."""

from __future__ import annotations

import contextlib
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import mask_tokens
from .errors import ContractError
from .model import MASKED, ElasticModel, SubStructure, Submap

PRESERVING_LEVELS = (50, 40, 30, 20, 15, 10, 5)


@dataclass
class ExpressiveScores:
    heads: np.ndarray  # (n_layers, n_heads)
    neurons: np.ndarray  # (n_layers, d_ff)
    n_samples: int

    def to_dict(self) -> dict:
        return {"heads": self.heads.tolist(), "neurons": self.neurons.tolist(), "n_samples": self.n_samples}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpressiveScores":
        return cls(np.asarray(d["heads"], dtype=float), np.asarray(d["neurons"], dtype=float), int(d["n_samples"]))


@contextlib.contextmanager
def frozen(model: ElasticModel):
    """Stop gradients flowing into the model's weights inside the block."""
    flags = {k: p.requires_grad for k, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False
    try:
        yield model
    finally:
        for k, p in model.params.items():
            p.requires_grad = flags[k]


def mlm_loss(model: ElasticModel, inputs, targets, structure=None, mode=MASKED, gates=None, trace=None):
    out = model.forward(inputs, structure, mode, gates, trace=trace)
    return nx.cross_entropy(model.mlm_logits(out.hidden), targets)


def record_scores(
    model: ElasticModel,
    mlm_batches: Iterable[np.ndarray],
    mask_rate: float = 0.15,
    seed: int = 0,
) -> ExpressiveScores:
    """Mean absolute MLM-loss gradient with respect to all-ones head/neuron gates.

    Each element of ``mlm_batches`` is a (batch, n) array of token ids; it is
    masked at ``mask_rate`` before the forward pass. Weights are not touched.
    """
    rng = np.random.default_rng(seed)
    c = model.config
    heads = np.zeros((c.n_layers, c.n_heads))
    neurons = np.zeros((c.n_layers, c.d_ff))
    count = 0
    full = SubStructure.full(c)
    with frozen(model):
        for tokens in mlm_batches:
            inputs, targets = mask_tokens(np.asarray(tokens), mask_rate, rng)
            gates = model.gates(requires_grad=True)
            nx.backward(mlm_loss(model, inputs, targets, full, MASKED, gates))
            for layer in range(c.n_layers):
                heads[layer] += np.abs(gates.heads[layer].grad)
                neurons[layer] += np.abs(gates.neurons[layer].grad)
            count += 1
    if count == 0:
        raise ContractError("record_scores needs at least one batch")
    return ExpressiveScores(heads / count, neurons / count, count)


def _unit(rows: np.ndarray, kind: str) -> np.ndarray:
    out = rows.astype(float).copy()
    for layer, row in enumerate(out):
        norm = np.linalg.norm(row)
        if norm == 0.0:
            warnings.warn(f"all-zero {kind} scores in layer {layer}; left unnormalized", RuntimeWarning)
            continue
        out[layer] = row / norm
    return out


def normalize_scores(scores: ExpressiveScores) -> ExpressiveScores:
    """Scale head scores and neuron scores of each layer to unit l2 norm."""
    return ExpressiveScores(_unit(scores.heads, "head"), _unit(scores.neurons, "neuron"), scores.n_samples)


def ranking(row: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep the lower index first."""
    row = np.asarray(row, dtype=float)
    return np.lexsort((np.arange(row.size), -row))


def keep_count(level: float, total: int) -> int:
    return math.ceil(Fraction(str(level)) * total / 100)


def derive_submap(
    scores: ExpressiveScores,
    levels: Sequence[float] = PRESERVING_LEVELS,
    report: list[str] | None = None,
) -> Submap:
    """Per layer, keep the top ceil(level% * A) heads and top ceil(level% * d_ff) neurons.

    Top-k sets of one fixed ranking are nested, so the result always
    satisfies the submap nesting rule. Counts that round to zero are raised
    to one and noted in ``report``.
    """
    levels = list(levels)
    if not levels:
        raise ContractError("no preserving levels given")
    if any(not 0 < lv <= 100 for lv in levels):
        raise ContractError(f"preserving levels must lie in (0, 100], got {levels}")
    if any(b >= a for a, b in zip(levels, levels[1:])):
        raise ContractError(f"preserving levels must be strictly decreasing, got {levels}")
    head_order = [ranking(r) for r in scores.heads]
    neuron_order = [ranking(r) for r in scores.neurons]
    n_heads, d_ff = scores.heads.shape[1], scores.neurons.shape[1]
    structures = []
    for lv in levels:
        kh, kn = keep_count(lv, n_heads), keep_count(lv, d_ff)
        if kh < 1 or kn < 1:
            if report is not None:
                report.append(f"level {lv}: clamped to at least one head and one neuron per layer")
            kh, kn = max(kh, 1), max(kn, 1)
        structures.append(SubStructure(
            lv,
            tuple(tuple(int(i) for i in o[:kh]) for o in head_order),
            tuple(tuple(int(i) for i in o[:kn]) for o in neuron_order),
        ))
    return Submap(tuple(structures))


def format_sidecar(scores: ExpressiveScores) -> str:
    """One line per layer: heads in rank order with their scores."""
    lines = []
    for layer, row in enumerate(scores.heads):
        ranked = " ".join(f"{int(i)}:{row[i]:.6f}" for i in ranking(row))
        lines.append(f"layer {layer}: {ranked}")
    return "\n".join(lines) + "\n"
