import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covgnn import autodiff as ad
from covgnn.autodiff import AdamState, MlpParams, Tensor

from oracles import numeric_grad, rel_error

TOL = 1e-4


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def check_grad(build, inputs: list[Tensor], rng, probe=None):
    """Backprop of sum(probe * build()) against central differences, for every input."""
    out = build()
    probe = rng.normal(size=out.shape) if probe is None else np.asarray(probe, dtype=np.float64)
    for t in inputs:
        t.zero_grad()
    out.backward(probe)
    for t in inputs:
        got = np.zeros_like(t.value) if t.grad is None else t.grad.copy()
        num = numeric_grad(lambda: float(np.sum(build().value * probe)), t.value)
        assert rel_error(got, num) <= TOL, f"gradient mismatch for input of shape {t.shape}"


matrices = st.tuples(st.integers(1, 5), st.integers(1, 5))


class TestMlp:
    def test_zero_params_give_zero(self):
        p = ad.init_mlp(np.random.default_rng(0), 3, 2)
        for t in p.tensors():
            t.value = np.zeros_like(t.value)
        out = ad.mlp_forward(p, Tensor(np.ones((4, 3))))
        np.testing.assert_array_equal(out.value, 0.0)

    def test_identity_weights_pass_positive_input(self):
        p = ad.init_mlp(np.random.default_rng(0), 3, 3, hidden=5)
        p.weights[0].value = np.eye(3, 5)
        p.weights[1].value = np.eye(5)
        p.weights[2].value = np.eye(5, 3)
        for b in p.biases:
            b.value = np.zeros_like(b.value)
        x = np.array([[0.5, 2.0, 3.0]])
        np.testing.assert_allclose(ad.mlp_forward(p, Tensor(x)).value, x)

    def test_shapes_and_init_range(self):
        rng = np.random.default_rng(0)
        p = ad.init_mlp(rng, 7, 3)
        assert [w.shape for w in p.weights] == [(7, 16), (16, 16), (16, 3)]
        assert all(not b.value.any() for b in p.biases)
        assert np.abs(p.weights[0].value).max() <= math.sqrt(6 / 23)

    def test_width_mismatch(self):
        p = ad.init_mlp(np.random.default_rng(0), 3, 2)
        with pytest.raises(ValueError):
            ad.mlp_forward(p, Tensor(np.ones((2, 4))))

    @settings(max_examples=20)
    @given(st.integers(0, 2**32 - 1), matrices)
    def test_gradient(self, seed, dims):
        rng = np.random.default_rng(seed)
        d_in, d_out = dims
        p = ad.init_mlp(rng, d_in, d_out, hidden=6)
        for b in p.biases:
            b.value = rng.normal(size=b.shape)
        x = leaf(rng.normal(size=(4, d_in)))
        check_grad(lambda: ad.mlp_forward(p, x), [x, *p.tensors()], rng)


class TestOps:
    @settings(max_examples=20)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
    def test_matmul_add_linear_relu_concat(self, seed, a, b, c):
        rng = np.random.default_rng(seed)
        x, w, bias = leaf(rng.normal(size=(a, b))), leaf(rng.normal(size=(b, c))), leaf(rng.normal(size=c))
        y = leaf(rng.normal(size=(a, c)))
        check_grad(lambda: ad.add(ad.matmul(x, w), bias), [x, w, bias], rng)
        check_grad(lambda: ad.linear(x, w, bias), [x, w, bias], rng)
        check_grad(lambda: ad.relu(ad.add(ad.matmul(x, w), y)), [x, w, y], rng)
        check_grad(lambda: ad.concat([x, y, x]), [x, y], rng)

    @settings(max_examples=20)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 12))
    def test_gather_take_slice_segment_mean(self, seed, n, m):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(n, 3)))
        idx = rng.integers(0, n, size=m)
        check_grad(lambda: ad.gather_rows(x, idx), [x], rng)
        check_grad(lambda: ad.gather_rows(x, ad.Index(idx, n)), [x], rng)
        flat = rng.integers(0, x.value.size, size=(m, 2))
        check_grad(lambda: ad.take(x, flat), [x], rng)
        lo = int(rng.integers(0, n))
        check_grad(lambda: ad.slice_rows(x, lo, n), [x], rng)
        e = leaf(rng.normal(size=(m, 3)))
        rcv = rng.integers(0, n, size=m)
        check_grad(lambda: ad.segment_mean(e, rcv, n), [e], rng)

    def test_shared_subexpression_accumulates(self):
        x = leaf([[2.0, -1.0]])
        w = Tensor(np.ones((2, 1)))
        y = ad.matmul(ad.concat([x, x]), Tensor(np.ones((4, 1))))
        y.backward()
        np.testing.assert_allclose(x.grad, [[2.0, 2.0]])
        z = ad.matmul(ad.relu(x), w)
        x.zero_grad()
        z.backward()
        np.testing.assert_allclose(x.grad, [[1.0, 0.0]])

    def test_constants_record_no_graph(self):
        out = ad.matmul(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 1))))
        assert not out.requires_grad and out._parents == ()

    def test_non_finite_trips(self):
        with pytest.raises(ad.NonFiniteError):
            Tensor([np.nan])
        big = leaf([[1e200]])
        with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
            ad.matmul(big, big)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_index_range_checked(self):
        with pytest.raises(ValueError):
            ad.Index([0, 3], 3)


class TestSegmentMean:
    def test_example(self):
        out = ad.segment_mean(Tensor([[2.0], [4.0]]), [0, 0], 2)
        np.testing.assert_array_equal(out.value, [[3.0], [0.0]])

    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 15))
    def test_permutation_invariant_and_linear(self, seed, n, m):
        rng = np.random.default_rng(seed)
        e1, e2 = rng.normal(size=(m, 2)), rng.normal(size=(m, 2))
        rcv = rng.integers(0, n, size=m)
        perm = rng.permutation(m)
        base = ad.segment_mean(Tensor(e1), rcv, n).value
        np.testing.assert_allclose(ad.segment_mean(Tensor(e1[perm]), rcv[perm], n).value, base, atol=1e-12)
        a, b = rng.normal(size=2)
        lin = ad.segment_mean(Tensor(a * e1 + b * e2), rcv, n).value
        np.testing.assert_allclose(lin, a * base + b * ad.segment_mean(Tensor(e2), rcv, n).value, atol=1e-12)
        empty = np.setdiff1d(np.arange(n), rcv)
        assert not base[empty].any()


class TestCrossEntropy:
    def test_two_equal(self):
        loss = ad.masked_cross_entropy(Tensor([[0.3, 0.3, 9.0]]), [[True, True, False]], [1])
        assert loss.value == pytest.approx(math.log(2))

    def test_four_equal(self):
        loss = ad.masked_cross_entropy(Tensor(np.zeros((3, 4))), np.ones((3, 4), bool), [0, 1, 3])
        assert loss.value == pytest.approx(1.3863, abs=1e-4)

    def test_label_on_masked_entry(self):
        with pytest.raises(ValueError):
            ad.masked_cross_entropy(Tensor(np.zeros((1, 4))), [[True, False, True, True]], [1])

    def test_weights(self):
        logits = Tensor([[0.0, 0.0], [5.0, 0.0]])
        mask = np.ones((2, 2), bool)
        unweighted = ad.masked_cross_entropy(logits, mask, [0, 0]).value
        weighted = ad.masked_cross_entropy(logits, mask, [0, 0], np.array([1.0, 0.0])).value
        assert weighted == pytest.approx(math.log(2))
        assert unweighted < weighted

    @settings(max_examples=25)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6))
    def test_gradient(self, seed, rows):
        rng = np.random.default_rng(seed)
        logits = leaf(rng.normal(size=(rows, 4)) * 3)
        mask = rng.random((rows, 4)) < 0.7
        mask[:, 0] = True
        labels = np.array([rng.choice(np.flatnonzero(m)) for m in mask])
        weights = rng.random(rows)
        check_grad(lambda: ad.masked_cross_entropy(logits, mask, labels, weights), [logits], rng)


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = {"w": leaf([[1.0, -2.0]])}
        state = AdamState()
        ad.adam_step(state, p, {"w": np.zeros((1, 2))})
        np.testing.assert_array_equal(p["w"].value, [[1.0, -2.0]])

    def test_decay_schedule(self):
        state = AdamState()
        p = {"w": leaf([[0.0]])}
        for _ in range(200):
            ad.adam_step(state, p, {"w": np.ones((1, 1))})
        assert state.current_lr() == pytest.approx(0.001 * 0.95)
        state.step = 399
        assert state.current_lr() == pytest.approx(0.001 * 0.95)
        state.step = 400
        assert state.current_lr() == pytest.approx(0.001 * 0.95**2)

    def test_first_step_moves_by_lr(self):
        p = {"w": leaf([[3.0]])}
        ad.adam_step(AdamState(), p, {"w": np.array([[1.0]])})
        assert p["w"].value[0, 0] == pytest.approx(3.0 - 0.001, rel=1e-6)

    def test_matches_closed_form_second_step(self):
        b1, b2, lr, eps = 0.9, 0.999, 0.001, 1e-8
        g1, g2 = 0.5, -2.0
        m1, v1 = (1 - b1) * g1, (1 - b2) * g1**2
        m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2**2
        upd1 = lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
        upd2 = lr * (m2 / (1 - b1**2)) / (math.sqrt(v2 / (1 - b2**2)) + eps)
        p = {"w": leaf([[0.0]])}
        state = AdamState()
        ad.adam_step(state, p, {"w": np.array([[g1]])})
        ad.adam_step(state, p, {"w": np.array([[g2]])})
        assert p["w"].value[0, 0] == pytest.approx(-upd1 - upd2, rel=1e-12)

    def test_shape_mismatch_and_bad_lr(self):
        with pytest.raises(ValueError):
            ad.adam_step(AdamState(), {"w": leaf([[1.0]])}, {"w": np.ones((2, 1))})
        with pytest.raises(ValueError):
            AdamState(lr=0.0)


def test_mlp_params_helpers():
    p = ad.init_mlp(np.random.default_rng(0), 2, 5, hidden=3)
    assert isinstance(p, MlpParams)
    assert (p.in_dim, p.out_dim, len(p.tensors())) == (2, 5, 6)
