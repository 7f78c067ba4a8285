import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from conftest import TINY, random_submap
from elasticlm import numerics as nx
from elasticlm.errors import ConfigError, ShapeError, StructureError
from elasticlm.model import MASKED, SLICED, ElasticModel, ModelConfig, SubStructure, Submap, compact
from elasticlm.pruning import PRESERVING_LEVELS


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-12) * g + b


def reference_encoder(params, config, tokens, structure):
    """Plain numpy encoder that only ever touches the retained weights."""
    P = {k: v.data for k, v in params.items()}
    n = tokens.shape[1]
    x = _ln(P["tok_emb"][tokens] + P["pos_emb"][:n], P["emb_ln_g"], P["emb_ln_b"])
    dh = config.head_dim
    for layer in range(config.n_layers):
        pre = f"layers.{layer}."
        outs = []
        for h in structure.heads[layer]:
            c = slice(h * dh, (h + 1) * dh)
            q = x @ P[pre + "wq"][:, c] + P[pre + "bq"][c]
            k = x @ P[pre + "wk"][:, c] + P[pre + "bk"][c]
            v = x @ P[pre + "wv"][:, c] + P[pre + "bv"][c]
            att = special.softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh), axis=-1)
            outs.append(att @ v @ P[pre + "wo"][c, :])
        x = _ln(x + sum(outs) + P[pre + "bo"], P[pre + "ln1_g"], P[pre + "ln1_b"])
        idx = list(structure.neurons[layer])
        hidden = x @ P[pre + "wi"][:, idx] + P[pre + "bi"][idx]
        act = hidden * special.ndtr(hidden)
        x = _ln(x + act @ P[pre + "wf"][idx, :] + P[pre + "bf"], P[pre + "ln2_g"], P[pre + "ln2_b"])
    return x


@pytest.fixture
def tokens(rng):
    return rng.integers(4, 128, size=(3, 10))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(n_rel_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=0)
    with pytest.raises(ConfigError):
        ModelConfig(n_layers=2.0)
    assert ModelConfig.from_dict(TINY.to_dict()) == TINY


def test_sliced_forward_matches_reference(tiny_model, tokens):
    for s in tiny_model.submap:
        out = tiny_model.forward(tokens, s.level, SLICED).hidden.data
        np.testing.assert_allclose(out, reference_encoder(tiny_model.params, TINY, tokens, s),
                                   rtol=1e-10, atol=1e-12)


def test_levels_below_full_differ(tiny_model, tokens):
    a = tiny_model.forward(tokens, 50).hidden.data
    b = tiny_model.forward(tokens, 5).hidden.data
    assert np.abs(a - b).max() > 1e-3


@pytest.mark.parametrize("level", PRESERVING_LEVELS)
def test_masked_equals_sliced(tiny_model, tokens, level):
    sliced = tiny_model.forward(tokens, level, SLICED).hidden.data
    masked = tiny_model.forward(tokens, level, MASKED).hidden.data
    np.testing.assert_allclose(masked, sliced, rtol=0, atol=1e-10)


def test_masked_with_unit_gates_equals_full(tiny_model, tokens):
    full = SubStructure.full(TINY)
    a = tiny_model.forward(tokens, full, MASKED, gates=tiny_model.gates()).hidden.data
    b = tiny_model.forward(tokens, full, SLICED).hidden.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_padding_mask_ignores_padded_keys(tiny_model, rng):
    seq = rng.integers(4, 128, size=6)
    padded = np.concatenate([seq, [0, 0, 0]])[None, :]
    mask = np.array([[True] * 6 + [False] * 3])
    a = tiny_model.forward(seq[None, :], 50).hidden.data
    b = tiny_model.forward(padded, 50, attention_mask=mask).hidden.data[:, :6]
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_forward_input_errors(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.forward(np.zeros((1, TINY.max_len + 1), dtype=int))
    with pytest.raises(ShapeError):
        tiny_model.forward(np.array([[5, TINY.vocab_size]]))
    with pytest.raises(StructureError):
        tiny_model.forward(np.array([[5, 6]]), 33)
    assert tiny_model.forward(np.array([5, 6, 7])).hidden.shape == (1, 3, TINY.d_model)


def test_substructure_validation():
    with pytest.raises(StructureError):
        SubStructure(50, ((0, 0),), ((1,),))
    with pytest.raises(StructureError):
        SubStructure(50, ((),), ((1,),))
    with pytest.raises(StructureError):
        SubStructure(50, ((9,), (0,)), ((1,), (1,))).validate_for(TINY)


def test_submap_rejects_non_nested_and_unordered():
    a = SubStructure(50, ((0, 1), (0, 1)), ((0, 1), (0, 1)))
    b = SubStructure(20, ((2,), (0,)), ((0,), (0,)))
    with pytest.raises(StructureError):
        Submap((a, b))
    with pytest.raises(StructureError):
        Submap((SubStructure(20, a.heads, a.neurons), a))
    sm = Submap((a,))
    assert Submap.from_dict(sm.to_dict()) == sm
    with pytest.raises(StructureError):
        sm[40]


@settings(max_examples=1000)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 12), st.integers(1, 40))
def test_derived_submaps_are_nested(seed, n_layers, n_heads, d_ff):
    config = ModelConfig(n_layers=n_layers, d_model=4, n_heads=n_heads, head_dim=1, d_ff=d_ff,
                         n_rel_heads=1, rel_head_dim=4)
    sm = random_submap(config, seed)
    for big, small in zip(sm, list(sm)[1:]):
        assert small.issubset(big)
        assert small.size() <= big.size()


def test_shared_store_is_not_copied(tiny_model):
    other = tiny_model.with_submap(random_submap(TINY, seed=9))
    assert all(other.params[k] is v for k, v in tiny_model.params.items())


def test_compact_store_equals_largest_structure(tiny_model, tokens):
    sm = tiny_model.submap
    student = compact(tiny_model, sm, seed=1)
    assert student.n_parameters() == tiny_model.structure_parameters(sm.largest)
    assert student.n_parameters() == student.structure_parameters(student.submap.largest)
    assert student.config.n_heads == len(sm.largest.heads[0])
    for s_t, s_s in zip(sm, student.submap):
        np.testing.assert_allclose(student.forward(tokens, s_s).hidden.data,
                                   tiny_model.forward(tokens, s_t).hidden.data, atol=1e-12)


def test_structure_parameters_of_full_structure(tiny_model):
    assert tiny_model.structure_parameters(SubStructure.full(TINY)) == tiny_model.n_parameters()


def test_flops_monotone(tiny_model):
    counts = [tiny_model.flops(s, 16) for s in tiny_model.submap]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    with nx.count_flops() as c:
        tiny_model.forward(np.ones((1, 16), dtype=int) * 7, tiny_model.submap.largest)
    # Measured matmul work includes the embedding-free encoder only.
    assert c[0] == tiny_model.flops(tiny_model.submap.largest, 16)


def test_relations_are_row_stochastic(tiny_model, tokens):
    for rel in (tiny_model.teacher_relations(tokens), tiny_model.select(5).relations(tokens)):
        for m in rel:
            assert m.shape == (3, TINY.n_rel_heads, 10, 10)
            np.testing.assert_allclose(m.data.sum(-1), 1.0, atol=1e-12)


def test_relation_scaling_uses_head_width(rng):
    x = rng.normal(size=(1, 3, 4))
    w = nx.Tensor(np.eye(4))
    b = nx.Tensor(np.zeros(4))
    from elasticlm.model import relations

    rel = relations(nx.Tensor(x), [(w, b)] * 3, n_heads=2)
    first = x[0, :, :2]
    np.testing.assert_allclose(rel.query.data[0, 0], special.softmax(first @ first.T / 2, axis=-1), atol=1e-13)


def test_init_is_deterministic():
    a, b = ElasticModel.init(TINY, seed=4), ElasticModel.init(TINY, seed=4)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
