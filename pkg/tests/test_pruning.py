import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import TINY
from elasticlm import numerics as nx
from elasticlm import pruning
from elasticlm.data import mask_tokens
from elasticlm.errors import ContractError
from elasticlm.model import MASKED, ElasticModel, ModelConfig, SubStructure


@pytest.fixture
def model():
    return ElasticModel.init(TINY, seed=11, std=0.2)


@pytest.fixture
def batch(rng):
    return rng.integers(4, 128, size=(4, 12))


def _masked_loss(model, inputs, targets, gates, trace=None):
    return pruning.mlm_loss(model, inputs, targets, SubStructure.full(TINY), MASKED, gates, trace)


def test_chain_rule_identity(model, batch, rng):
    inputs, targets = mask_tokens(batch, 0.3, rng)
    gates = model.gates()
    trace = {}
    nx.backward(_masked_loss(model, inputs, targets, gates, trace))
    for layer in range(TINY.n_layers):
        ctx = trace[f"layers.{layer}.head_ctx"]
        via_outputs = (ctx.grad * ctx.data).sum(axis=(0, 2, 3))
        np.testing.assert_allclose(np.abs(gates.heads[layer].grad), np.abs(via_outputs), rtol=0, atol=1e-8)
        act = trace[f"layers.{layer}.ffn_act"]
        via_acts = (act.grad * act.data).sum(axis=(0, 1))
        np.testing.assert_allclose(np.abs(gates.neurons[layer].grad), np.abs(via_acts), rtol=0, atol=1e-8)


def test_scores_match_finite_differences_of_gates(model, batch):
    scores = pruning.record_scores(model, [batch], mask_rate=0.3, seed=5)
    inputs, targets = mask_tokens(batch, 0.3, np.random.default_rng(5))
    eps = 1e-6
    for layer, kind, j in [(0, "heads", 1), (1, "heads", 3), (0, "neurons", 7), (1, "neurons", 30)]:
        vals = []
        for sign in (1, -1):
            gates = model.gates(requires_grad=False)
            getattr(gates, kind)[layer].data[j] += sign * eps
            with nx.no_grad():
                vals.append(_masked_loss(model, inputs, targets, gates).item())
        numeric = abs(vals[0] - vals[1]) / (2 * eps)
        got = getattr(scores, kind)[layer, j]
        assert got == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def test_zero_output_head_scores_zero(model, batch):
    heads = [1, 3]
    for layer in range(TINY.n_layers):
        for h in heads:
            cols = slice(h * TINY.head_dim, (h + 1) * TINY.head_dim)
            model.params[f"layers.{layer}.wv"].data[:, cols] = 0.0
            model.params[f"layers.{layer}.bv"].data[cols] = 0.0
    scores = pruning.record_scores(model, [batch, batch[::-1]])
    assert (scores.heads[:, heads] == 0.0).all()
    assert (scores.heads[:, [0, 2]] > 0.0).all()


def test_record_scores_leaves_weights_untouched(model, batch):
    before = model.state_dict()
    pruning.record_scores(model, [batch])
    assert all(np.array_equal(before[k], p.data) for k, p in model.params.items())
    assert all(p.grad is None for p in model.params.values())
    assert all(p.requires_grad for p in model.params.values())


def test_record_scores_needs_data(model):
    with pytest.raises(ContractError):
        pruning.record_scores(model, [])


def test_normalization_is_unit_per_layer(rng):
    s = pruning.ExpressiveScores(rng.random((3, 8)), rng.random((3, 20)), 4)
    n = pruning.normalize_scores(s)
    np.testing.assert_allclose(np.linalg.norm(n.heads, axis=1), 1.0)
    np.testing.assert_allclose(np.linalg.norm(n.neurons, axis=1), 1.0)


def test_all_zero_group_warns():
    s = pruning.ExpressiveScores(np.zeros((1, 4)), np.ones((1, 4)), 1)
    with pytest.warns(RuntimeWarning):
        n = pruning.normalize_scores(s)
    assert (n.heads == 0).all()


@settings(max_examples=1000)
@given(arrays(np.int64, st.integers(1, 40), elements=st.integers(0, 10**6)))
def test_normalization_preserves_ranking(ints):
    row = ints.astype(float)
    if not row.any():
        return
    scaled = pruning._unit(row[None, :], "head")[0]
    np.testing.assert_array_equal(pruning.ranking(scaled), pruning.ranking(row))


@settings(max_examples=300)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e6, allow_subnormal=False)))
def test_normalization_is_weakly_monotone(row):
    if np.linalg.norm(row) == 0:
        return
    scaled = pruning._unit(row[None, :], "head")[0]
    # Values one ulp apart may tie after scaling; order is never reversed.
    greater = row[:, None] > row[None, :]
    assert (scaled[:, None] >= scaled[None, :])[greater].all()


def test_ranking_breaks_ties_by_index():
    np.testing.assert_array_equal(pruning.ranking(np.array([0.2, 0.5, 0.2, 0.5])), [1, 3, 0, 2])


def test_keep_counts_at_desk_scale():
    assert [pruning.keep_count(lv, 8) for lv in pruning.PRESERVING_LEVELS] == [4, 4, 3, 2, 2, 1, 1]
    assert [pruning.keep_count(lv, 256) for lv in pruning.PRESERVING_LEVELS] == [128, 103, 77, 52, 39, 26, 13]
    assert pruning.keep_count(100, 8) == 8


def test_derive_submap_takes_top_scores():
    config = ModelConfig(n_layers=1, d_model=8, n_heads=8, head_dim=1, d_ff=10, n_rel_heads=1, rel_head_dim=8)
    heads = np.array([[0.1, 0.9, 0.3, 0.8, 0.2, 0.7, 0.05, 0.6]])
    neurons = np.arange(10, dtype=float)[None, :]
    sm = pruning.derive_submap(pruning.ExpressiveScores(heads, neurons, 1), (50, 20))
    assert sm[50].heads == ((1, 3, 5, 7),)
    assert sm[20].heads == ((1, 3),)
    assert sm[50].neurons == ((5, 6, 7, 8, 9),)
    sm[50].validate_for(config)


def test_derive_submap_rejects_bad_levels(rng):
    s = pruning.ExpressiveScores(rng.random((1, 4)), rng.random((1, 8)), 1)
    for bad in ([], [50, 50], [20, 50], [0], [120]):
        with pytest.raises(ContractError):
            pruning.derive_submap(s, bad)


def test_tiny_level_keeps_one_of_each(rng):
    s = pruning.ExpressiveScores(rng.random((2, 4)), rng.random((2, 8)), 1)
    sm = pruning.derive_submap(s, (1,))
    assert all(len(h) == 1 for h in sm[1].heads) and all(len(n) == 1 for n in sm[1].neurons)


def test_sidecar_one_line_per_layer(rng):
    s = pruning.ExpressiveScores(np.array([[0.1, 0.3], [0.5, 0.2]]), rng.random((2, 3)), 1)
    lines = pruning.format_sidecar(s).splitlines()
    assert lines == ["layer 0: 1:0.300000 0:0.100000", "layer 1: 0:0.500000 1:0.200000"]


def test_scores_roundtrip(rng):
    s = pruning.ExpressiveScores(rng.random((2, 4)), rng.random((2, 8)), 3)
    back = pruning.ExpressiveScores.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.heads, s.heads)
    assert back.n_samples == 3
