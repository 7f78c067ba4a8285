"""Elastic encoder-only transformer.

An :class:`ElasticModel` stores one copy of every weight. A
:class:`SubStructure` names the heads and FFN neurons each layer keeps, and a
:class:`Submap` orders those structures from largest to smallest with each
nested inside the previous one. Forward passes run in one of two modes:

``masked``
    every head/neuron is computed and multiplied by a 0/1 gate (or by a gate
    tensor that carries gradients, used to record expressive scores);
``sliced``
    the weights of retained heads/neurons are gathered and the pruned ones
    are never computed.

Both modes produce the same numbers; sliced is what makes small structures
fast. Blocks are post-norm: ``LN(x + MHA(x))`` then ``LN(h + FFN(h))``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError, StructureError
from .numerics import Tensor

MASKED = "masked"
SLICED = "sliced"
_NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 8
    head_dim: int = 8
    d_ff: int = 256
    vocab_size: int = 256
    max_len: int = 64
    n_rel_heads: int = 8
    rel_head_dim: int = 8
    n_classes: int = 2

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.n_rel_heads * self.rel_head_dim != self.d_model:
            raise ConfigError(
                f"relation heads {self.n_rel_heads} x {self.rel_head_dim} must span d_model={self.d_model}"
            )

    @property
    def attn_dim(self) -> int:
        return self.n_heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class SubStructure:
    """Retained head / neuron indices (0-based, ascending) for each layer."""

    level: float
    heads: tuple[tuple[int, ...], ...]
    neurons: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.heads) != len(self.neurons):
            raise StructureError("heads and neurons must cover the same layers")
        heads = tuple(tuple(sorted(int(i) for i in h)) for h in self.heads)
        neurons = tuple(tuple(sorted(int(i) for i in n)) for n in self.neurons)
        for layer, (h, n) in enumerate(zip(heads, neurons)):
            if not h or not n:
                raise StructureError(f"layer {layer} retains no heads or no neurons")
            if len(set(h)) != len(h) or len(set(n)) != len(n):
                raise StructureError(f"layer {layer} has duplicate indices")
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "neurons", neurons)

    @classmethod
    def full(cls, config: ModelConfig, level: float = 100.0) -> "SubStructure":
        return cls(
            level,
            tuple(tuple(range(config.n_heads)) for _ in range(config.n_layers)),
            tuple(tuple(range(config.d_ff)) for _ in range(config.n_layers)),
        )

    @property
    def n_layers(self) -> int:
        return len(self.heads)

    def size(self) -> int:
        return sum(len(h) for h in self.heads) + sum(len(n) for n in self.neurons)

    def issubset(self, other: "SubStructure") -> bool:
        return all(
            set(h) <= set(oh) and set(n) <= set(on)
            for h, n, oh, on in zip(self.heads, self.neurons, other.heads, other.neurons)
        )

    def validate_for(self, config: ModelConfig) -> None:
        if self.n_layers != config.n_layers:
            raise StructureError(f"structure has {self.n_layers} layers, model has {config.n_layers}")
        for layer, (h, n) in enumerate(zip(self.heads, self.neurons)):
            if h[0] < 0 or h[-1] >= config.n_heads:
                raise StructureError(f"layer {layer} head index out of range")
            if n[0] < 0 or n[-1] >= config.d_ff:
                raise StructureError(f"layer {layer} neuron index out of range")

    def to_dict(self) -> dict:
        return {"level": self.level, "heads": [list(h) for h in self.heads],
                "neurons": [list(n) for n in self.neurons]}

    @classmethod
    def from_dict(cls, d: dict) -> "SubStructure":
        return cls(d["level"], tuple(map(tuple, d["heads"])), tuple(map(tuple, d["neurons"])))


@dataclass(frozen=True)
class Submap:
    """Nested structures, largest first, with strictly decreasing levels."""

    structures: tuple[SubStructure, ...]

    def __post_init__(self):
        structures = tuple(self.structures)
        object.__setattr__(self, "structures", structures)
        if not structures:
            raise StructureError("a submap needs at least one structure")
        for big, small in zip(structures, structures[1:]):
            if not small.level < big.level:
                raise StructureError("submap levels must be strictly decreasing")
            if not small.issubset(big):
                raise StructureError(f"level {small.level} is not nested inside level {big.level}")

    def __iter__(self):
        return iter(self.structures)

    def __len__(self):
        return len(self.structures)

    @property
    def levels(self) -> list[float]:
        return [s.level for s in self.structures]

    @property
    def largest(self) -> SubStructure:
        return self.structures[0]

    @property
    def smallest(self) -> SubStructure:
        return self.structures[-1]

    def __getitem__(self, level) -> SubStructure:
        for s in self.structures:
            if s.level == level:
                return s
        raise StructureError(f"unknown structure level {level!r}; known: {self.levels}")

    def __contains__(self, level) -> bool:
        return any(s.level == level for s in self.structures)

    def restrict(self, levels: Iterable[float]) -> "Submap":
        return Submap(tuple(self[lv] for lv in sorted(set(levels), reverse=True)))

    def to_dict(self) -> list:
        return [s.to_dict() for s in self.structures]

    @classmethod
    def from_dict(cls, items: list) -> "Submap":
        return cls(tuple(SubStructure.from_dict(d) for d in items))


@dataclass
class RelationTriple:
    """Query-, key- and value-relations, each (batch, R, n, n) and row-stochastic."""

    query: Tensor
    key: Tensor
    value: Tensor

    def __iter__(self):
        return iter((self.query, self.key, self.value))

    def detach(self) -> "RelationTriple":
        return RelationTriple(self.query.detach(), self.key.detach(), self.value.detach())


@dataclass
class Gates:
    """Per-layer head gates and neuron gates used in masked mode."""

    heads: list[Tensor]
    neurons: list[Tensor]

    def parameters(self) -> list[Tensor]:
        return [*self.heads, *self.neurons]


@dataclass
class EncoderOutput:
    hidden: Tensor
    last_layer_input: Tensor
    trace: dict = field(default_factory=dict)

    @property
    def cls(self) -> Tensor:
        b, n, d = self.hidden.shape
        return nx.reshape(nx.take(self.hidden, [0], axis=1), (b, d))


def _layer_names(layer: int) -> list[str]:
    p = f"layers.{layer}."
    return [p + s for s in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
                              "wi", "bi", "wf", "bf", "ln2_g", "ln2_b")]


class ElasticModel:
    """Shared parameter store plus the submap of structures it serves."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], submap: Submap | None = None):
        self.config = config
        self.params = params
        self.submap = submap if submap is not None else Submap((SubStructure.full(config),))
        for s in self.submap:
            s.validate_for(config)
        self._check_shapes()

    # -- construction ------------------------------------------------------
    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, std: float = 0.02) -> "ElasticModel":
        rng = np.random.default_rng(seed)
        c = config

        def w(*shape):
            return rng.normal(0.0, std, size=shape)

        p: dict[str, np.ndarray] = {
            "tok_emb": w(c.vocab_size, c.d_model),
            "pos_emb": w(c.max_len, c.d_model),
            "emb_ln_g": np.ones(c.d_model),
            "emb_ln_b": np.zeros(c.d_model),
        }
        for layer in range(c.n_layers):
            names = _layer_names(layer)
            shapes = [
                (c.d_model, c.attn_dim), (c.attn_dim,), (c.d_model, c.attn_dim), (c.attn_dim,),
                (c.d_model, c.attn_dim), (c.attn_dim,), (c.attn_dim, c.d_model), (c.d_model,),
                None, None, (c.d_model, c.d_ff), (c.d_ff,), (c.d_ff, c.d_model), (c.d_model,),
                None, None,
            ]
            for name, shape in zip(names, shapes):
                if name.endswith("_g"):
                    p[name] = np.ones(c.d_model)
                elif name.endswith("_b") or (shape is not None and len(shape) == 1):
                    p[name] = np.zeros(shape if shape is not None else c.d_model)
                else:
                    p[name] = w(*shape)
        for s in ("q", "k", "v"):
            p[f"rel.w{s}"] = w(c.d_model, c.d_model)
            p[f"rel.b{s}"] = np.zeros(c.d_model)
        p["mlm.w"] = w(c.d_model, c.vocab_size)
        p["mlm.b"] = np.zeros(c.vocab_size)
        p["cls.w"] = w(c.d_model, c.n_classes)
        p["cls.b"] = np.zeros(c.n_classes)
        p["rank.w"] = w(c.d_model)
        params = {k: nx.parameter(v, name=k) for k, v in p.items()}
        return cls(config, params)

    def _check_shapes(self) -> None:
        c = self.config
        expected = {
            "tok_emb": (c.vocab_size, c.d_model), "pos_emb": (c.max_len, c.d_model),
            "mlm.w": (c.d_model, c.vocab_size), "rel.wq": (c.d_model, c.d_model),
        }
        for layer in range(c.n_layers):
            expected[f"layers.{layer}.wq"] = (c.d_model, c.attn_dim)
            expected[f"layers.{layer}.wi"] = (c.d_model, c.d_ff)
        for name, shape in expected.items():
            if name not in self.params:
                raise ConfigError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> "ElasticModel":
        params = {k: nx.parameter(v.data.copy(), name=k) for k, v in self.params.items()}
        return ElasticModel(self.config, params, self.submap)

    def with_submap(self, submap: Submap) -> "ElasticModel":
        """Same parameter store (not copied) serving a different submap."""
        return ElasticModel(self.config, self.params, submap)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def structure_parameters(self, structure: SubStructure) -> int:
        """Number of stored weights a structure actually uses."""
        c = self.config
        shared = sum(p.size for k, p in self.params.items() if not k.startswith("layers."))
        per_layer = 0
        for h, n in zip(structure.heads, structure.neurons):
            width = len(h) * c.head_dim
            per_layer += 3 * (c.d_model * width + width) + width * c.d_model + c.d_model
            per_layer += len(n) * (2 * c.d_model + 1) + c.d_model
            per_layer += 4 * c.d_model
        return shared + per_layer

    def gates(self, requires_grad: bool = True) -> Gates:
        c = self.config
        return Gates(
            [Tensor(np.ones(c.n_heads), requires_grad=requires_grad) for _ in range(c.n_layers)],
            [Tensor(np.ones(c.d_ff), requires_grad=requires_grad) for _ in range(c.n_layers)],
        )

    # -- structure selection -----------------------------------------------
    def select(self, level=None) -> "ActiveStructure":
        """Handle that runs forward passes under one structure of the submap."""
        structure = self.submap.largest if level is None else self.submap[level]
        return ActiveStructure(self, structure)

    def structure(self, level=None) -> SubStructure:
        return self.submap.largest if level is None else self.submap[level]

    # -- blocks --------------------------------------------------------------
    def _p(self, layer: int, name: str) -> Tensor:
        return self.params[f"layers.{layer}.{name}"]

    def embed(self, tokens: np.ndarray) -> Tensor:
        b, n = tokens.shape
        e = nx.embedding(self.params["tok_emb"], tokens)
        pos = nx.take(self.params["pos_emb"], np.arange(n), axis=0)
        return nx.layer_norm(e + pos, self.params["emb_ln_g"], self.params["emb_ln_b"])

    def mha_forward(
        self,
        x: Tensor,
        layer: int,
        heads: Sequence[int],
        mode: str = SLICED,
        gate: Tensor | None = None,
        attn_bias: np.ndarray | None = None,
        trace: dict | None = None,
    ) -> Tensor:
        """Multi-head attention output (before residual/norm) for ``heads``."""
        c = self.config
        if len(heads) == 0:
            raise StructureError(f"layer {layer} has an empty head set")
        b, n, _ = x.shape
        wq, bq = self._p(layer, "wq"), self._p(layer, "bq")
        wk, bk = self._p(layer, "wk"), self._p(layer, "bk")
        wv, bv = self._p(layer, "wv"), self._p(layer, "bv")
        wo = self._p(layer, "wo")
        if mode == SLICED and len(heads) < c.n_heads:
            cols = (np.asarray(heads)[:, None] * c.head_dim + np.arange(c.head_dim)).reshape(-1)
            wq, bq = nx.take(wq, cols, 1), nx.take(bq, cols, 0)
            wk, bk = nx.take(wk, cols, 1), nx.take(bk, cols, 0)
            wv, bv = nx.take(wv, cols, 1), nx.take(bv, cols, 0)
            wo = nx.take(wo, cols, 0)
            h = len(heads)
        elif mode in (SLICED, MASKED):
            h = c.n_heads
        else:
            raise ValueError(f"unknown mode {mode!r}")

        def split(t):
            return nx.transpose(nx.reshape(t, (b, n, h, c.head_dim)), (0, 2, 1, 3))

        q = split(x @ wq + bq)
        k = split(x @ wk + bk)
        v = split(x @ wv + bv)
        scores = (q @ nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(c.head_dim))
        if attn_bias is not None:
            scores = scores + attn_bias
        ctx = nx.softmax(scores, axis=-1) @ v
        if mode == MASKED:
            g = _gate_vector(gate, heads, c.n_heads)
            if trace is not None:
                trace[f"layers.{layer}.head_ctx"] = ctx.retain_grad()
            ctx = ctx * g.reshape(1, c.n_heads, 1, 1)
        merged = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (b, n, h * c.head_dim))
        return merged @ wo + self._p(layer, "bo")

    def ffn_forward(
        self,
        x: Tensor,
        layer: int,
        neurons: Sequence[int],
        mode: str = SLICED,
        gate: Tensor | None = None,
        trace: dict | None = None,
    ) -> Tensor:
        """Feed-forward output (before residual/norm) for ``neurons``."""
        c = self.config
        if len(neurons) == 0:
            raise StructureError(f"layer {layer} has an empty neuron set")
        wi, bi, wf = self._p(layer, "wi"), self._p(layer, "bi"), self._p(layer, "wf")
        if mode == SLICED and len(neurons) < c.d_ff:
            idx = np.asarray(neurons)
            wi, bi, wf = nx.take(wi, idx, 1), nx.take(bi, idx, 0), nx.take(wf, idx, 0)
        elif mode not in (SLICED, MASKED):
            raise ValueError(f"unknown mode {mode!r}")
        act = nx.gelu(x @ wi + bi)
        if mode == MASKED:
            if trace is not None:
                trace[f"layers.{layer}.ffn_act"] = act.retain_grad()
            act = act * _gate_vector(gate, neurons, c.d_ff)
        return act @ wf + self._p(layer, "bf")

    def layer_forward(self, x, layer, structure, mode, gates=None, attn_bias=None, trace=None):
        hg = gates.heads[layer] if gates is not None else None
        ng = gates.neurons[layer] if gates is not None else None
        a = self.mha_forward(x, layer, structure.heads[layer], mode, hg, attn_bias, trace)
        x = nx.layer_norm(x + a, self._p(layer, "ln1_g"), self._p(layer, "ln1_b"))
        f = self.ffn_forward(x, layer, structure.neurons[layer], mode, ng, trace)
        return nx.layer_norm(x + f, self._p(layer, "ln2_g"), self._p(layer, "ln2_b"))

    def forward(
        self,
        tokens,
        structure: SubStructure | float | None = None,
        mode: str = SLICED,
        gates: Gates | None = None,
        attention_mask: np.ndarray | None = None,
        trace: dict | None = None,
    ) -> EncoderOutput:
        """Encode ``tokens`` (batch, n) or (n,) under ``structure``."""
        c = self.config
        if not isinstance(structure, SubStructure):
            structure = self.structure(structure)
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
            if attention_mask is not None:
                attention_mask = np.asarray(attention_mask)[None, :]
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be (batch, n), got {tokens.shape}")
        if tokens.shape[1] > c.max_len:
            raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_len {c.max_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
            raise ShapeError("token id outside the vocabulary")
        attn_bias = None
        if attention_mask is not None:
            m = np.asarray(attention_mask, dtype=bool)
            if not m.all():
                attn_bias = np.where(m, 0.0, _NEG_INF)[:, None, None, :]
        x = self.embed(tokens)
        last_input = x
        for layer in range(c.n_layers):
            last_input = x
            x = self.layer_forward(x, layer, structure, mode, gates, attn_bias, trace)
        return EncoderOutput(x, last_input, trace if trace is not None else {})

    # -- heads ---------------------------------------------------------------
    def mlm_logits(self, hidden: Tensor) -> Tensor:
        return hidden @ self.params["mlm.w"] + self.params["mlm.b"]

    def class_logits(self, cls_vec: Tensor) -> Tensor:
        return cls_vec @ self.params["cls.w"] + self.params["cls.b"]

    def rank_score(self, cls_vec: Tensor) -> Tensor:
        w = self.params["rank.w"]
        return nx.reshape(cls_vec @ nx.reshape(w, (w.size, 1)), (cls_vec.shape[0],))

    # -- relations -----------------------------------------------------------
    def student_relations(self, hidden: Tensor) -> RelationTriple:
        """Relations of the extra (never pruned) relation block on ``hidden``."""
        p = self.params
        return relations(hidden, [(p[f"rel.w{s}"], p[f"rel.b{s}"]) for s in "qkv"],
                         self.config.n_rel_heads)

    def teacher_relations(self, tokens, attention_mask=None) -> RelationTriple:
        """Relations of the last MHA block, its heads merged and re-split into R."""
        c = self.config
        if c.attn_dim % c.n_rel_heads:
            raise ConfigError(f"{c.n_rel_heads} relation heads do not divide attention dim {c.attn_dim}")
        out = self.forward(tokens, self.submap.largest, SLICED, attention_mask=attention_mask)
        last = c.n_layers - 1
        heads = self.submap.largest.heads[last]
        cols = (np.asarray(heads)[:, None] * c.head_dim + np.arange(c.head_dim)).reshape(-1)
        weights = []
        for s in "qkv":
            w, bias = self._p(last, f"w{s}"), self._p(last, f"b{s}")
            if len(heads) < c.n_heads:
                w, bias = nx.take(w, cols, 1), nx.take(bias, cols, 0)
            weights.append((w, bias))
        return relations(out.last_layer_input, weights, c.n_rel_heads)

    # -- compute accounting --------------------------------------------------
    def flops(self, structure: SubStructure, seq_len: int) -> int:
        """Multiply-adds of one single-sequence sliced forward (encoder only)."""
        c = self.config
        n, d = seq_len, c.d_model
        total = 0
        for h, f in zip(structure.heads, structure.neurons):
            w = len(h) * c.head_dim
            total += 3 * n * d * w + 2 * len(h) * n * n * c.head_dim + n * w * d
            total += 2 * n * d * len(f)
        return total


def _gate_vector(gate: Tensor | None, kept: Sequence[int], width: int) -> Tensor:
    mask = np.zeros(width)
    mask[list(kept)] = 1.0
    if gate is None:
        return Tensor(mask)
    if gate.shape != (width,):
        raise ShapeError(f"gate shape {gate.shape} does not match width {width}")
    return gate * mask


def relations(hidden: Tensor, weights: Sequence[tuple[Tensor, Tensor]], n_heads: int) -> RelationTriple:
    """softmax(X W_j (X W_j)^T / d_R) for each of ``n_heads`` relation heads.

    ``weights`` holds (W, b) for the query, key and value streams; each W has
    n_heads * d_R columns.
    """
    if hidden.ndim == 2:
        hidden = nx.reshape(hidden, (1, *hidden.shape))
    b, n, _ = hidden.shape
    mats = []
    for w, bias in weights:
        width = w.shape[1]
        if width % n_heads:
            raise ConfigError(f"{n_heads} relation heads do not divide width {width}")
        dr = width // n_heads
        proj = nx.transpose(nx.reshape(hidden @ w + bias, (b, n, n_heads, dr)), (0, 2, 1, 3))
        scores = (proj @ nx.transpose(proj, (0, 1, 3, 2))) * (1.0 / dr)
        mats.append(nx.softmax(scores, axis=-1))
    return RelationTriple(*mats)


class ActiveStructure:
    """A per-caller view of one structure; holds no parameter copies."""

    def __init__(self, model: ElasticModel, structure: SubStructure):
        self.model = model
        self.structure = structure

    @property
    def level(self):
        return self.structure.level

    def forward(self, tokens, mode: str = SLICED, attention_mask=None, gates=None, trace=None):
        return self.model.forward(tokens, self.structure, mode, gates, attention_mask, trace)

    def relations(self, tokens, attention_mask=None) -> RelationTriple:
        out = self.forward(tokens, attention_mask=attention_mask)
        return self.model.student_relations(out.hidden)


def compact(teacher: ElasticModel, submap: Submap, seed: int = 0) -> ElasticModel:
    """Prune ``teacher`` to the submap's largest structure and re-index.

    The returned model stores exactly the weights of the largest structure
    (its config reports the retained head and neuron counts), and its submap
    refers to positions inside that compact store. Every layer must retain
    the same number of heads and of neurons. The relation block is freshly
    initialised from ``seed``; all other weights are copied.
    """
    tc = teacher.config
    largest = submap.largest
    n_heads = {len(h) for h in largest.heads}
    n_ff = {len(n) for n in largest.neurons}
    if len(n_heads) != 1 or len(n_ff) != 1:
        raise ConfigError("compaction needs the same head and neuron count in every layer")
    config = ModelConfig(**{**tc.to_dict(), "n_heads": n_heads.pop(), "d_ff": n_ff.pop()})
    src = teacher.params
    p: dict[str, np.ndarray] = {}
    for name, t in src.items():
        if not name.startswith("layers."):
            p[name] = t.data.copy()
    for layer in range(tc.n_layers):
        heads = np.asarray(largest.heads[layer])
        cols = (heads[:, None] * tc.head_dim + np.arange(tc.head_dim)).reshape(-1)
        neurons = np.asarray(largest.neurons[layer])

        def g(name):
            return src[f"layers.{layer}.{name}"].data

        pre = f"layers.{layer}."
        for s in "qkv":
            p[pre + f"w{s}"] = g(f"w{s}")[:, cols].copy()
            p[pre + f"b{s}"] = g(f"b{s}")[cols].copy()
        p[pre + "wo"] = g("wo")[cols, :].copy()
        p[pre + "bo"] = g("bo").copy()
        p[pre + "wi"] = g("wi")[:, neurons].copy()
        p[pre + "bi"] = g("bi")[neurons].copy()
        p[pre + "wf"] = g("wf")[neurons, :].copy()
        p[pre + "bf"] = g("bf").copy()
        for s in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            p[pre + s] = g(s).copy()
    rng = np.random.default_rng(seed)
    for s in "qkv":
        p[f"rel.w{s}"] = rng.normal(0.0, 0.02, size=(tc.d_model, tc.d_model))
        p[f"rel.b{s}"] = np.zeros(tc.d_model)

    remapped = []
    for s in submap:
        heads, neurons = [], []
        for layer in range(tc.n_layers):
            hpos = {old: i for i, old in enumerate(largest.heads[layer])}
            npos = {old: i for i, old in enumerate(largest.neurons[layer])}
            heads.append(tuple(hpos[i] for i in s.heads[layer]))
            neurons.append(tuple(npos[i] for i in s.neurons[layer]))
        remapped.append(SubStructure(s.level, tuple(heads), tuple(neurons)))
    params = {k: nx.parameter(v, name=k) for k, v in p.items()}
    return ElasticModel(config, params, Submap(tuple(remapped)))
