import math

import numpy as np
import pytest

from radialrouter import numcore as nc
from radialrouter.errors import (ConfigError, ContractError, DimensionError,
                                 ValidationError)


def fd_grads(f, params, step=1e-5):
    """Central-difference oracle: numeric dL/dp for each parameter entry."""
    grads = []
    for p in params:
        g = np.zeros_like(p.values)
        for idx in np.ndindex(*p.values.shape):
            orig = p.values[idx]
            p.values[idx] = orig + step
            plus = f().item()
            p.values[idx] = orig - step
            minus = f().item()
            p.values[idx] = orig
            g[idx] = (plus - minus) / (2 * step)
        grads.append(g)
    return grads


def analytic_grads(f, params):
    nc.zero_grads(params)
    with nc.record() as tape:
        loss = f()
    nc.backward(tape, loss)
    return [np.zeros_like(p.values) if p.grad is None else p.grad.copy()
            for p in params]


def assert_grads_match(f, params, rtol=1e-6, step=1e-5, atol=1e-9):
    """Entries pass on relative error, or absolutely when both grads are tiny."""
    ana = analytic_grads(f, params)
    num = fd_grads(f, params, step=step)
    for a, n in zip(ana, num):
        err = np.abs(a - n)
        rel = err / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
        bad = (err > atol) & (rel > rtol)
        assert not bad.any(), f"grad mismatch: rel={rel.max()}, abs={err.max()}"


class TestTensor:
    def test_shapes_normalized(self):
        assert nc.Tensor(3.0).shape == (1, 1)
        assert nc.Tensor([1.0, 2.0]).shape == (1, 2)
        assert nc.Tensor([[1.0], [2.0]]).shape == (2, 1)

    def test_3d_rejected(self):
        with pytest.raises(DimensionError):
            nc.Tensor(np.zeros((2, 2, 2)))


class TestMatmul:
    def test_identity(self):
        m = nc.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = nc.matmul(nc.Tensor(np.eye(2)), m)
        np.testing.assert_array_equal(out.values, m.values)

    def test_hand_checked(self):
        a = nc.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = nc.Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(nc.matmul(a, b).values, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2, 2))))

    def test_grads_match_fd(self):
        rng = np.random.default_rng(0)
        a = nc.parameter(rng.standard_normal((3, 4)))
        b = nc.parameter(rng.standard_normal((4, 2)))
        w = nc.constant(rng.standard_normal((3, 2)))
        assert_grads_match(lambda: nc.sum_all(nc.mul(nc.matmul(a, b), w)), [a, b])


class TestConcat:
    def test_rows_stacked_in_order(self):
        a, b, c = (nc.Tensor([[float(i)] * 3]) for i in range(3))
        out = nc.concat_rows([a, b, c])
        np.testing.assert_array_equal(out.values, [[0] * 3, [1] * 3, [2] * 3])

    def test_single_part_identity(self):
        a = nc.Tensor([[1.0, 2.0]])
        np.testing.assert_array_equal(nc.concat_rows([a]).values, a.values)

    def test_column_mismatch(self):
        with pytest.raises(DimensionError):
            nc.concat_rows([nc.Tensor([[1.0, 2.0]]), nc.Tensor([[1.0]])])

    def test_backward_routes_ones(self):
        a = nc.parameter([[1.0, 2.0]])
        b = nc.parameter([[3.0, 4.0]])
        with nc.record() as tape:
            loss = nc.sum_all(nc.concat_rows([a, b]))
        nc.backward(tape, loss)
        np.testing.assert_array_equal(a.grad, [[1.0, 1.0]])
        np.testing.assert_array_equal(b.grad, [[1.0, 1.0]])

    def test_cols_grads_match_fd(self):
        rng = np.random.default_rng(1)
        a = nc.parameter(rng.standard_normal((1, 2)))
        b = nc.parameter(rng.standard_normal((1, 3)))
        w = nc.constant(rng.standard_normal((1, 5)))
        assert_grads_match(lambda: nc.sum_all(nc.mul(nc.concat_cols([a, b]), w)), [a, b])


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = nc.softmax_row(nc.Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.values, [[1 / 3] * 3], atol=1e-15)

    def test_length_one(self):
        assert nc.softmax_row(nc.Tensor([[5.0]])).item() == 1.0

    def test_no_overflow(self):
        # exact tail mass is e^-1000/(1+e^-1000) ~ 10^-434.3: underflows to 0.0
        out = nc.softmax_row(nc.Tensor([[1000.0, 0.0]]))
        assert np.isfinite(out.values).all()
        assert out.values[0, 0] == pytest.approx(1.0, abs=1e-15)
        assert out.values[0, 1] <= 1e-300

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            x = rng.standard_normal((1, 5)) * 10
            p1 = nc.softmax_row(nc.Tensor(x)).values
            p2 = nc.softmax_row(nc.Tensor(x + 123.456)).values
            assert abs(p1.sum() - 1.0) < 1e-12
            np.testing.assert_allclose(p1, p2, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            nc.softmax_row(nc.Tensor(np.zeros((1, 0))))

    def test_grads_match_fd(self):
        rng = np.random.default_rng(3)
        x = nc.parameter(rng.standard_normal((1, 6)))
        w = nc.constant(rng.standard_normal((1, 6)))
        assert_grads_match(lambda: nc.sum_all(nc.mul(nc.softmax_row(x), w)), [x])


class TestLayerNorm:
    def unit_affine(self, d):
        return nc.constant(np.ones((1, d))), nc.constant(np.zeros((1, d)))

    def test_constant_vector_damped_to_zero(self):
        gain, bias = self.unit_affine(4)
        out = nc.layer_norm(nc.Tensor([[2.0] * 4]), gain, bias)
        np.testing.assert_allclose(out.values, np.zeros((1, 4)), atol=1e-12)

    def test_already_normalized(self):
        gain, bias = self.unit_affine(2)
        out = nc.layer_norm(nc.Tensor([[1.0, -1.0]]), gain, bias)
        np.testing.assert_allclose(out.values, [[1.0, -1.0]], atol=1e-5)

    def test_output_statistics(self):
        # epsilon damping shrinks output variance by eps/(var+eps); use
        # inputs with variance >> 1e-5 so the 1e-6 bound is meaningful
        rng = np.random.default_rng(4)
        for _ in range(100):
            x = rng.standard_normal((1, 16)) * 10
            gain, bias = self.unit_affine(16)
            y = nc.layer_norm(nc.Tensor(x), gain, bias).values
            assert abs(y.mean()) < 1e-9
            assert abs(((y - y.mean()) ** 2).mean() - 1.0) < 1e-6

    def test_d1_rejected(self):
        gain, bias = self.unit_affine(1)
        with pytest.raises(DimensionError):
            nc.layer_norm(nc.Tensor([[1.0]]), gain, bias)

    def test_grads_match_fd(self):
        rng = np.random.default_rng(5)
        x = nc.parameter(rng.standard_normal((1, 8)))
        gain = nc.parameter(rng.standard_normal((1, 8)))
        bias = nc.parameter(rng.standard_normal((1, 8)))
        w = nc.constant(rng.standard_normal((1, 8)))
        assert_grads_match(
            lambda: nc.sum_all(nc.mul(nc.layer_norm(x, gain, bias), w)),
            [x, gain, bias], rtol=1e-5)


class TestRelu:
    def test_definition(self):
        out = nc.relu(nc.Tensor([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(out.values, [[0.0, 0.0, 2.0]])

    def test_all_negative_zero_grads(self):
        x = nc.parameter([[-1.0, -2.0]])
        with nc.record() as tape:
            loss = nc.sum_all(nc.relu(x))
        nc.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.zeros((1, 2)))

    def test_grad_is_positivity_mask(self):
        rng = np.random.default_rng(6)
        x = nc.parameter(rng.standard_normal((2, 5)) + 0.3)  # keep away from 0
        with nc.record() as tape:
            loss = nc.sum_all(nc.relu(x))
        nc.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, (x.values > 0).astype(float))
        assert_grads_match(lambda: nc.sum_all(nc.relu(x)), [x])


class TestAttention:
    def identity_proj(self, d):
        return (nc.constant(np.eye(d)) for _ in range(3))

    def test_single_row_identity_projections(self):
        d = 4
        q = nc.Tensor([[0.1, 0.2, 0.3, 0.4]])
        ctx = nc.Tensor([[1.0, 2.0, 3.0, 4.0]])
        wq, wk, wv = self.identity_proj(d)
        out = nc.scaled_dot_attention(q, ctx, wq, wk, wv)
        np.testing.assert_allclose(out.values, ctx.values, atol=1e-12)

    def test_two_identical_rows_match_single(self):
        d = 4
        rng = np.random.default_rng(7)
        q = nc.Tensor(rng.standard_normal((1, d)))
        row = rng.standard_normal((1, d))
        wq = nc.constant(rng.standard_normal((d, d)))
        wk = nc.constant(rng.standard_normal((d, d)))
        wv = nc.constant(rng.standard_normal((d, d)))
        one = nc.scaled_dot_attention(q, nc.Tensor(row), wq, wk, wv)
        two = nc.scaled_dot_attention(q, nc.Tensor(np.vstack([row, row])), wq, wk, wv)
        np.testing.assert_allclose(two.values, one.values, atol=1e-12)

    def test_empty_context_rejected(self):
        d = 2
        wq, wk, wv = self.identity_proj(d)
        with pytest.raises(DimensionError):
            nc.scaled_dot_attention(nc.Tensor([[1.0, 2.0]]),
                                    nc.Tensor(np.zeros((0, d))), wq, wk, wv)

    def test_scaled_dot_grads_match_fd(self):
        rng = np.random.default_rng(8)
        q = nc.parameter(rng.standard_normal((1, 4)))
        ctx = nc.parameter(rng.standard_normal((3, 4)))
        wq = nc.parameter(rng.standard_normal((4, 4)))
        wk = nc.parameter(rng.standard_normal((4, 4)))
        wv = nc.parameter(rng.standard_normal((4, 4)))
        w = nc.constant(rng.standard_normal((1, 4)))
        assert_grads_match(
            lambda: nc.sum_all(nc.mul(nc.scaled_dot_attention(q, ctx, wq, wk, wv), w)),
            [q, ctx, wq, wk, wv], rtol=1e-5)

    def test_mh_reduces_to_scaled_dot(self):
        rng = np.random.default_rng(9)
        d = 6
        q = nc.Tensor(rng.standard_normal((1, d)))
        ctx = nc.Tensor(rng.standard_normal((4, d)))
        wq = nc.constant(rng.standard_normal((d, d)))
        wk = nc.constant(rng.standard_normal((d, d)))
        wv = nc.constant(rng.standard_normal((d, d)))
        wo = nc.constant(np.eye(d))
        mh = nc.multi_head_attention(q, ctx, wq, wk, wv, wo, heads=1)
        sd = nc.scaled_dot_attention(q, ctx, wq, wk, wv)
        assert (mh.values == sd.values).all()  # bit-identical

    def test_mh_single_row_identity(self):
        d = 4
        q = nc.Tensor([[0.5, -0.5, 1.0, 2.0]])
        row = nc.Tensor([[1.0, 2.0, 3.0, 4.0]])
        eye = nc.constant(np.eye(d))
        out = nc.multi_head_attention(q, row, eye, eye, eye, eye, heads=2)
        np.testing.assert_allclose(out.values, row.values, atol=1e-12)

    def test_bad_head_count(self):
        d = 6
        eye = nc.constant(np.eye(d))
        with pytest.raises(ConfigError):
            nc.multi_head_attention(nc.Tensor(np.zeros((1, d))),
                                    nc.Tensor(np.zeros((2, d))),
                                    eye, eye, eye, eye, heads=4)

    def test_mh_grads_match_fd(self):
        rng = np.random.default_rng(10)
        d = 8
        q = nc.parameter(rng.standard_normal((1, d)))
        ctx = nc.parameter(rng.standard_normal((3, d)))
        wq = nc.parameter(rng.standard_normal((d, d)) * 0.5)
        wk = nc.parameter(rng.standard_normal((d, d)) * 0.5)
        wv = nc.parameter(rng.standard_normal((d, d)) * 0.5)
        wo = nc.parameter(rng.standard_normal((d, d)) * 0.5)
        w = nc.constant(rng.standard_normal((1, d)))
        assert_grads_match(
            lambda: nc.sum_all(nc.mul(
                nc.multi_head_attention(q, ctx, wq, wk, wv, wo, heads=4), w)),
            [q, ctx, wq, wk, wv, wo], rtol=1e-4)


class TestBackward:
    def test_sum_gives_ones(self):
        x = nc.parameter(np.arange(6.0).reshape(2, 3))
        with nc.record() as tape:
            loss = nc.sum_all(x)
        nc.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_zero_scale_gives_zero_grads(self):
        x = nc.parameter([[1.0, 2.0]])
        with nc.record() as tape:
            loss = nc.sum_all(nc.scale(x, 0.0))
        nc.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.zeros((1, 2)))

    def test_non_scalar_loss_rejected(self):
        x = nc.parameter([[1.0, 2.0]])
        with nc.record() as tape:
            y = nc.relu(x)
        with pytest.raises(ContractError):
            nc.backward(tape, y)

    def test_unreachable_loss_rejected(self):
        x = nc.parameter([[1.0]])
        with nc.record() as tape:
            nc.relu(x)
        with pytest.raises(ContractError):
            nc.backward(tape, nc.Tensor([[1.0]]))

    def test_accumulates_without_reset(self):
        x = nc.parameter([[2.0]])
        with nc.record() as tape:
            loss = nc.sum_all(x)
        nc.backward(tape, loss)
        nc.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [[2.0]])

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        x = nc.parameter(rng.standard_normal((1, 5)))
        w = nc.parameter(rng.standard_normal((5, 5)))

        def run():
            nc.zero_grads([x, w])
            with nc.record() as tape:
                loss = nc.sum_all(nc.softmax_row(nc.matmul(x, w)))
            nc.backward(tape, loss)
            return x.grad.copy(), w.grad.copy()

        g1, g2 = run(), run()
        assert (g1[0] == g2[0]).all() and (g1[1] == g2[1]).all()


class TestComposite:
    def test_mixed_graph_grads_match_fd(self):
        """MHAttn -> MLP -> softmax -> KL-style graph, all params checked."""
        rng = np.random.default_rng(12)
        d = 6
        q = nc.parameter(rng.standard_normal((1, d)))
        ctx = nc.parameter(rng.standard_normal((3, d)))
        wq, wk, wv, wo = (nc.parameter(rng.standard_normal((d, d)) * 0.4)
                          for _ in range(4))
        w1 = nc.parameter(rng.standard_normal((d, 5)) * 0.4)
        w2 = nc.parameter(rng.standard_normal((5, 4)) * 0.4)
        target = np.abs(rng.standard_normal(4)) + 0.1
        target /= target.sum()
        log_q = nc.constant(np.log(target).reshape(1, 4))

        def f():
            h = nc.multi_head_attention(q, ctx, wq, wk, wv, wo, heads=2)
            z = nc.matmul(nc.relu(nc.matmul(h, w1)), w2)
            p = nc.softmax_row(z)
            return nc.sum_all(nc.mul(p, nc.sub(nc.log(p), log_q)))

        assert_grads_match(f, [q, ctx, wq, wk, wv, wo, w1, w2], rtol=1e-4)


class TestGradCheck:
    def test_quadratic_exact(self):
        x = nc.parameter([[1.0, -2.0, 3.0]])
        report = nc.grad_check(lambda: nc.sum_all(nc.mul(x, x)), {"x": x})
        assert report.passed
        assert report.max_rel_err < 1e-9

    def test_constant_function_absolute_fallback(self):
        x = nc.parameter([[1.0, 2.0]])
        report = nc.grad_check(lambda: nc.sum_all(nc.scale(x, 0.0)), [x])
        assert report.passed

    def test_bad_step_rejected(self):
        x = nc.parameter([[1.0]])
        with pytest.raises(ConfigError):
            nc.grad_check(lambda: nc.sum_all(x), [x], step=0.1)

    def test_nonfinite_loss_reported(self):
        x = nc.parameter([[1e308]])
        with np.errstate(over="ignore"):
            report = nc.grad_check(
                lambda: nc.sum_all(nc.mul(nc.scale(x, 1e308), x)), [x])
        assert not report.passed
        assert "finite" in report.message


class TestSmallOps:
    def test_pick_and_log_softmax_fd(self):
        rng = np.random.default_rng(13)
        x = nc.parameter(rng.standard_normal((1, 5)))
        assert_grads_match(
            lambda: nc.scale(nc.pick(nc.log_softmax_row(x), 2), -1.0), [x])

    def test_cosine_sim_value_and_fd(self):
        a = nc.parameter([[1.0, 0.0]])
        b = nc.parameter([[1.0, 1.0]])
        assert nc.cosine_sim(a, b).item() == pytest.approx(1 / math.sqrt(2))
        rng = np.random.default_rng(14)
        a2 = nc.parameter(rng.standard_normal((1, 6)))
        b2 = nc.parameter(rng.standard_normal((1, 6)))
        assert_grads_match(lambda: nc.cosine_sim(a2, b2), [a2, b2], rtol=1e-5)

    def test_cosine_zero_norm_rejected(self):
        with pytest.raises(ValidationError):
            nc.cosine_sim(nc.Tensor([[0.0, 0.0]]), nc.Tensor([[1.0, 0.0]]))

    def test_transpose_add_broadcast_fd(self):
        rng = np.random.default_rng(15)
        a = nc.parameter(rng.standard_normal((3, 4)))
        b = nc.parameter(rng.standard_normal((1, 4)))
        w = nc.constant(rng.standard_normal((4, 3)))
        assert_grads_match(
            lambda: nc.sum_all(nc.mul(nc.transpose(nc.add(a, b)), w)), [a, b])


class TestFlopAccounting:
    def test_matmul_flops(self):
        with nc.record() as tape:
            nc.matmul(nc.Tensor(np.ones((3, 4))), nc.Tensor(np.ones((4, 2))))
        assert tape.total_flops() == 3 * 4 * 2

    def test_attention_flops(self):
        d, m, h = 8, 3, 2
        rng = np.random.default_rng(16)
        q = nc.Tensor(rng.standard_normal((1, d)))
        ctx = nc.Tensor(rng.standard_normal((m, d)))
        ws = [nc.Tensor(rng.standard_normal((d, d))) for _ in range(4)]
        with nc.record() as tape:
            nc.multi_head_attention(q, ctx, *ws, heads=h)
        assert tape.total_flops() == (2 * m + 2) * d * d + 2 * m * d
