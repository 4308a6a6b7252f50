"""Aggregation head tests: hand cases, permutation invariance, gradients."""

import numpy as np
import pytest

from mammoth import autodiff as ad
from mammoth import aggregators as agg
from mammoth.errors import EmptyBagError
from mammoth.model import build_model

F64 = np.float64


def t(data, dtype=F64, grad=False):
    return ad.Tensor(np.asarray(data, dtype=dtype), requires_grad=grad, dtype=dtype)


class TestMeanPool:
    def test_single_row(self):
        z, head = t([[1.0, 2.0]]), t([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(agg.mean_pool_classify(z, head).data, [[1.0, 2.0]])

    def test_opposite_rows_cancel(self):
        rng = np.random.default_rng(0)
        row = rng.standard_normal(4)
        z = t(np.stack([row, -row]))
        head = t(rng.standard_normal((3, 4)))
        np.testing.assert_allclose(agg.mean_pool_classify(z, head).data, 0.0, atol=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((9, 4))
        head = t(rng.standard_normal((2, 4)))
        a = agg.mean_pool_classify(t(z), head).data
        b = agg.mean_pool_classify(t(z[rng.permutation(9)]), head).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_empty_error(self):
        with pytest.raises(EmptyBagError):
            agg.mean_pool_classify(t(np.zeros((0, 3))), t(np.zeros((2, 3))))


class TestMaxPool:
    def test_single_row(self):
        z, head = t([[2.0, -1.0]]), t(np.eye(2))
        np.testing.assert_allclose(agg.max_pool_classify(z, head).data, [[2.0, -1.0]])

    def test_global_max_row_selected(self):
        z = t([[10.0, 0.0], [0.0, 1.0]])
        out = agg.max_pool_classify(z, t(np.eye(2)))
        np.testing.assert_allclose(out.data, [[10.0, 0.0]])

    def test_tie_selects_lowest_row(self):
        z = t([[3.0, 0.0], [3.0, 0.0]], grad=True)
        out = agg.max_pool_classify(z, t(np.eye(2)))
        ad.reduce_mean(out).backward()
        assert np.all(z.grad[1] == 0.0) and np.any(z.grad[0] != 0.0)

    def test_backward_only_through_selected_row(self):
        rng = np.random.default_rng(2)
        z = t(rng.standard_normal((5, 3)), grad=True)
        head = t(rng.standard_normal((2, 3)))
        out = agg.max_pool_classify(z, head)
        ad.reduce_mean(out).backward()
        winner = (z.data @ head.data.T).max(axis=1).argmax()
        nonzero_rows = np.nonzero(np.abs(z.grad).sum(axis=1))[0]
        assert nonzero_rows.tolist() == [winner]


class TestAbmil:
    def _params(self, rng, dim=4, hidden=6, classes=3):
        mk = lambda r, c: t(rng.standard_normal((r, c)), grad=True)
        return mk(hidden, dim), mk(hidden, dim), mk(1, hidden), mk(classes, dim)

    def test_single_row_full_attention(self):
        rng = np.random.default_rng(3)
        v, u, w, head = self._params(rng)
        z = t(rng.standard_normal((1, 4)))
        logits, attn = agg.abmil_classify(z, v, u, w, head)
        np.testing.assert_allclose(attn.data, [[1.0]], atol=1e-12)
        np.testing.assert_allclose(logits.data, z.data @ head.data.T, atol=1e-10)

    def test_identical_rows_uniform_attention(self):
        rng = np.random.default_rng(4)
        v, u, w, head = self._params(rng)
        z = t(np.tile(rng.standard_normal(4), (6, 1)))
        _, attn = agg.abmil_classify(z, v, u, w, head)
        np.testing.assert_allclose(attn.data, 1 / 6, atol=1e-12)

    def test_attention_positive_and_normalized(self):
        rng = np.random.default_rng(5)
        v, u, w, head = self._params(rng)
        z = t(rng.standard_normal((11, 4)))
        _, attn = agg.abmil_classify(z, v, u, w, head)
        assert np.all(attn.data > 0)
        np.testing.assert_allclose(attn.data.sum(), 1.0, atol=1e-6)

    def test_permutation_invariant_logits(self):
        rng = np.random.default_rng(6)
        v, u, w, head = self._params(rng)
        z = rng.standard_normal((8, 4))
        a, _ = agg.abmil_classify(t(z), v, u, w, head)
        b, _ = agg.abmil_classify(t(z[rng.permutation(8)]), v, u, w, head)
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_gradient_through_attention_and_ce(self):
        rng = np.random.default_rng(7)
        v, u, w, head = self._params(rng)
        z = t(rng.standard_normal((5, 4)), grad=True)

        def f():
            logits, _ = agg.abmil_classify(z, v, u, w, head)
            return ad.cross_entropy_with_logits(logits, 1)

        err = ad.check_gradients(f, [z, v, u, w, head], samples=10, rng=rng)
        assert err < 1e-4


class TestAggregatorGradients:
    @pytest.mark.parametrize("kind", ["mean", "max", "abmil"])
    def test_ce_gradcheck(self, kind):
        rng = np.random.default_rng(8)
        a = agg.Aggregator(kind, embed_dim=4, num_classes=3, attn_dim=5,
                           rng=rng, dtype=F64)
        z = t(rng.standard_normal((6, 4)) + 0.1, grad=True)

        def f():
            logits, _ = a.forward(z)
            return ad.cross_entropy_with_logits(logits, 0)

        err = ad.check_gradients(f, [z, *a.params.values()], samples=10, rng=rng)
        assert err < 1e-4


class TestFullModelGradients:
    @pytest.mark.parametrize("variant", ["linear", "mammoth", "soft",
                                         "sparse_softmax", "sparse_sinkhorn",
                                         "sparse_mh"])
    def test_ce_gradcheck_tiny_shapes(self, variant):
        rng = np.random.default_rng(9)
        model = build_model(variant, "mean", d=12, d_out=8, num_classes=2,
                            rng=rng, dtype=F64, heads=2, partition_dim=3,
                            experts=2, slots=2, q=2, total_slots=4, mh_heads=2)
        feats = rng.standard_normal((5, 12))

        def f():
            return model.loss(feats, 1, training=False)

        err = ad.check_gradients(f, list(model.params.values()), samples=5, rng=rng)
        assert err < 1e-4, f"{variant}: {err}"
