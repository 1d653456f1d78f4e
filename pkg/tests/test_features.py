import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dephn import autodiff as ad
from dephn.features import (
    BRANCHES,
    Embedding,
    FeaturePipeline,
    FieldSchema,
    MultiHeadSelfAttention,
    SsgGate,
    build_branch_input,
    soft_selection_gate,
)


def identity_attention(dim, heads=1):
    att = MultiHeadSelfAttention(dim, heads, np.random.default_rng(0))
    for lin in (att.query, att.key, att.value, att.out):
        lin.weight.value[...] = np.eye(dim)
        lin.bias.value[...] = 0.0
    return att


class TestSchema:
    @pytest.mark.parametrize("cards,dim", [((), 8), ((5, 1), 8), ((5,), 0)])
    def test_rejects_bad_schema(self, cards, dim):
        with pytest.raises(ValueError):
            FieldSchema(cards, dim)

    def test_out_of_vocabulary_names_field(self):
        schema = FieldSchema((3, 4))
        with pytest.raises(IndexError, match="f1"):
            schema.validate(np.array([[0, 4]]))


class TestEmbedding:
    def setup_method(self):
        self.schema = FieldSchema((4, 5), embed_dim=3)
        self.emb = Embedding(self.schema, np.random.default_rng(1))

    def test_shape(self):
        assert self.emb(np.array([[1, 2]])).shape == (1, 2, 3)

    def test_same_index_same_row(self):
        E = self.emb(np.array([[0, 0], [0, 0]])).value
        np.testing.assert_array_equal(E[0], E[1])

    def test_distinct_indices_distinct_rows(self):
        E = self.emb(np.array([[0, 0], [1, 0]])).value
        assert not np.allclose(E[0, 0], E[1, 0])

    def test_fields_use_separate_tables(self):
        E = self.emb(np.array([[2, 2]])).value
        assert not np.allclose(E[0, 0], E[0, 1])


class TestAttention:
    def test_indivisible_heads(self):
        with pytest.raises(ValueError, match="divisible"):
            MultiHeadSelfAttention(6, 4, np.random.default_rng(0))

    def test_single_field_returns_value_projection(self):
        att = identity_attention(4)
        E = ad.constant(np.random.default_rng(0).normal(size=(3, 1, 4)))
        np.testing.assert_allclose(att(E).value, E.value, atol=1e-14)

    def test_zero_in_zero_out(self):
        att = MultiHeadSelfAttention(8, 2, np.random.default_rng(0))
        out = att(ad.constant(np.zeros((2, 5, 8)))).value
        np.testing.assert_array_equal(out, 0.0)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        att = MultiHeadSelfAttention(8, 2, rng)
        E = rng.normal(size=(2, 5, 8))
        perm = rng.permutation(5)
        out = att(ad.constant(E)).value
        out_perm = att(ad.constant(E[:, perm])).value
        np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-12)

    def test_brute_force_single_head(self):
        rng = np.random.default_rng(4)
        att = MultiHeadSelfAttention(4, 1, rng)
        E = rng.normal(size=(1, 3, 4))
        q = E[0] @ att.query.weight.value + att.query.bias.value
        k = E[0] @ att.key.weight.value + att.key.bias.value
        v = E[0] @ att.value.weight.value + att.value.bias.value
        s = q @ k.T / 2.0
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        expected = (w @ v) @ att.out.weight.value + att.out.bias.value
        np.testing.assert_allclose(att(ad.constant(E)).value[0], expected, atol=1e-12)


class TestSoftSelection:
    def test_half_gate_arithmetic(self):
        gate = SsgGate(1, 2)
        out = soft_selection_gate(ad.constant([[[0.0, 2.0]]]), ad.constant([[[2.0, 4.0]]]), gate)
        np.testing.assert_allclose(out.value, [[[1.0, 3.0]]])

    @pytest.mark.parametrize("raw,picks", [(30.0, "sa"), (-30.0, "raw")])
    def test_saturation(self, raw, picks):
        rng = np.random.default_rng(0)
        E, E_sa = rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3, 2))
        out = soft_selection_gate(ad.constant(E), ad.constant(E_sa), SsgGate(3, 2, init=raw)).value
        np.testing.assert_allclose(out, E_sa if picks == "sa" else E, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(
        raw=arrays(np.float64, 6, elements=st.floats(-8, 8)),
        E=arrays(np.float64, (2, 3, 2), elements=st.floats(-5, 5)),
        E_sa=arrays(np.float64, (2, 3, 2), elements=st.floats(-5, 5)),
    )
    def test_convex_blend(self, raw, E, E_sa):
        gate = SsgGate(3, 2)
        gate.raw.value[...] = raw
        out = soft_selection_gate(ad.constant(E), ad.constant(E_sa), gate).value
        assert np.all(out >= np.minimum(E, E_sa) - 1e-12)
        assert np.all(out <= np.maximum(E, E_sa) + 1e-12)

    def test_gate_values_strictly_inside_unit_interval(self):
        gate = SsgGate(2, 2)
        gate.raw.value[...] = [-5, 0, 5, 1]
        assert np.all((gate.values() > 0) & (gate.values() < 1))

    def test_both_inputs_receive_gradient(self):
        rng = np.random.default_rng(1)
        E, E_sa = ad.Parameter(rng.normal(size=(2, 2, 2))), ad.Parameter(rng.normal(size=(2, 2, 2)))
        loss = (soft_selection_gate(E, E_sa, SsgGate(2, 2)) ** 2).sum()
        grads = ad.backward(loss, {"E": E, "E_sa": E_sa})
        assert np.all(grads["E"] != 0) and np.all(grads["E_sa"] != 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_selection_gate(ad.constant(np.zeros((1, 2, 2))), ad.constant(np.zeros((1, 2, 3))), SsgGate(2, 2))

    def test_per_field_gate_broadcasts(self):
        gate = SsgGate(2, 3, per_field=True)
        assert gate.raw.shape == (2,)
        assert gate.values().shape == (6,)


class TestBranchInput:
    def test_concatenation_order(self):
        E = ad.constant(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        np.testing.assert_array_equal(build_branch_input(E).value, [[1.0, 2.0, 3.0, 4.0]])

    def test_flatten_is_lossless_and_keeps_batch_order(self):
        E = np.random.default_rng(0).normal(size=(4, 3, 2))
        z = build_branch_input(ad.constant(E)).value
        np.testing.assert_array_equal(z.reshape(4, 3, 2), E)
        assert build_branch_input(ad.constant(E), keep_fields=True).shape == (4, 3, 2)


class TestPipeline:
    def setup_method(self):
        self.schema = FieldSchema((5, 6, 7), embed_dim=4)
        self.X = np.array([[0, 1, 2], [4, 5, 6]])

    def test_three_independent_gates(self):
        pipe = FeaturePipeline(self.schema, np.random.default_rng(0))
        assert set(pipe.ssg) == set(BRANCHES)
        before = pipe(self.X)
        pipe.ssg["cross"].raw.value[...] = 3.0
        after = pipe(self.X)
        assert not np.allclose(before.cross.value, after.cross.value)
        np.testing.assert_array_equal(before.dnn.value, after.dnn.value)
        np.testing.assert_array_equal(before.field.value, after.field.value)

    def test_branch_shapes(self):
        out = FeaturePipeline(self.schema, np.random.default_rng(0))(self.X)
        assert out.dnn.shape == (2, 12)
        assert out.cross.shape == (2, 12)
        assert out.field.shape == (2, 3, 4)

    def test_without_ssg_every_branch_sees_raw_embedding(self):
        pipe = FeaturePipeline(self.schema, np.random.default_rng(0), use_ssg=False)
        out = pipe(self.X)
        np.testing.assert_array_equal(out.dnn.value, out.embeddings.value.reshape(2, -1))
        np.testing.assert_array_equal(out.field.value, out.embeddings.value)
