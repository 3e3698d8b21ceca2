import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mansr.nn import (
    SGD,
    Adam,
    BackwardError,
    GRUEncoder,
    NonFiniteError,
    ParamSet,
    SoftmaxDecoder,
    finite_difference_check,
    gru_step,
    linear_softmax_loss,
    pad_prefixes,
    sigmoid,
    softmax,
    uniform_init,
)

# one-unit cell, every weight 0.5, zero bias, x=1, h=0; evaluated with scalar math.
# z = sigmoid(0.5), candidate = tanh(0.5), h' = z * candidate
GRU_1D_Z = 0.6224593312018546
GRU_1D_CAND = 0.46211715726000974
GRU_1D_H = 0.28764913664496794


class TestPrimitives:
    def test_sigmoid_stable(self):
        x = np.array([-1000.0, 0.0, 1000.0])
        np.testing.assert_allclose(sigmoid(x), [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(sigmoid(x)))

    @settings(max_examples=50)
    @given(hnp.arrays(np.float64, (3, 7), elements=st.floats(-500, 500)))
    def test_softmax_rows_sum_to_one(self, logits):
        p = softmax(logits)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(p >= 0)


class TestGRU:
    def test_scalar_cell(self):
        h = gru_step(np.array([[1.0]]), np.array([[0.0]]), np.full((1, 3), 0.5), np.full((1, 3), 0.5), np.zeros(3))
        assert h[0, 0] == pytest.approx(GRU_1D_H, abs=1e-12)
        assert GRU_1D_Z * GRU_1D_CAND == pytest.approx(GRU_1D_H, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gru_step(np.ones((1, 2)), np.zeros((1, 3)), np.ones((3, 9)), np.ones((3, 9)), np.zeros(9))

    def _encoder(self, rng, n=6, d=3, h=4):
        p = ParamSet()
        p.add("embedding", uniform_init(rng, (n, d), 0.5))
        p.add("gru_W", uniform_init(rng, (d, 3 * h), 0.5))
        p.add("gru_U", uniform_init(rng, (h, 3 * h), 0.5))
        p.add("gru_b", uniform_init(rng, (3 * h,), 0.5))
        return p, GRUEncoder(p)

    def test_encoder_matches_step_loop(self):
        rng = np.random.default_rng(1)
        p, enc = self._encoder(rng)
        prefixes = [[1, 2, 3], [4], [0, 5]]
        idx, lengths = pad_prefixes(prefixes)
        out = enc.forward(idx, lengths)
        for row, seq in zip(out, prefixes):
            h = np.zeros((1, 4))
            for i in seq:
                h = gru_step(p["embedding"][i][None], h, p["gru_W"], p["gru_U"], p["gru_b"])
            np.testing.assert_allclose(row, h[0], atol=1e-14)

    def test_padding_rows_are_neutral(self):
        rng = np.random.default_rng(2)
        _, enc = self._encoder(rng)
        a = enc.forward(*pad_prefixes([[1, 2]]), keep_cache=False)
        b = enc.forward(*pad_prefixes([[1, 2]], pad_to=5), keep_cache=False)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(b[1:], 0.0)

    def test_backward_needs_forward(self):
        _, enc = self._encoder(np.random.default_rng(0))
        with pytest.raises(BackwardError):
            enc.backward(np.ones((1, 4)))

    def test_gradient_check(self):
        rng = np.random.default_rng(3)
        p, enc = self._encoder(rng)
        prefixes = [[1, 2, 3], [4], [0, 5, 5, 2]]
        idx, lengths = pad_prefixes(prefixes)
        proj = rng.normal(size=(3, 4))

        def loss():
            return float(np.sum(enc.forward(idx, lengths, keep_cache=False) * proj))

        p.zero_grad()
        enc.forward(idx, lengths)
        enc.backward(proj)
        assert finite_difference_check(loss, p, rng=rng) < 1e-6


class TestDecoder:
    def test_linear_softmax_gradient(self):
        rng = np.random.default_rng(4)
        p = ParamSet()
        p.add("dec_W", rng.normal(size=(9, 5)))
        p.add("dec_b", rng.normal(size=9))
        dec = SoftmaxDecoder(p)
        c = rng.normal(size=(4, 5))
        t = np.array([0, 3, 8, 3])

        p.zero_grad()
        dec.loss(c, t)
        dc = dec.backward()
        assert finite_difference_check(lambda: dec.loss(c, t), p, rng=rng, n_samples=45) < 1e-7

        # input gradient too
        eps = 1e-6
        num = np.zeros_like(c)
        for idx in np.ndindex(*c.shape):
            c[idx] += eps
            up = dec.loss(c, t)
            c[idx] -= 2 * eps
            down = dec.loss(c, t)
            c[idx] += eps
            num[idx] = (up - down) / (2 * eps)
        np.testing.assert_allclose(dc, num, rtol=1e-6, atol=1e-9)

    def test_single_example_loss(self):
        W, b, c = np.eye(3), np.zeros(3), np.array([1.0, 0.0, 0.0])
        probs, loss = linear_softmax_loss(c, W, b, 0)
        assert loss == pytest.approx(-math.log(math.e / (math.e + 2)))
        with pytest.raises(IndexError):
            linear_softmax_loss(c, W, b, 3)


class TestOptimizers:
    def test_adam_first_step(self):
        p = ParamSet()
        p.add("w", np.array([0.0]))
        p.zero_grad()
        p.grads["w"][:] = 1.0
        Adam(1e-3).step(p)
        # bias-corrected m/sqrt(v) is 1/(1 + 1e-8) at t=1
        assert p["w"][0] == pytest.approx(-0.0009999999900000003, abs=1e-18)

    def test_sgd_zero_lr_is_noop(self):
        p = ParamSet()
        p.add("w", np.arange(3.0))
        p.zero_grad()
        p.grads["w"][:] = 5.0
        before = p.copy()
        SGD(0.0).step(p)
        assert p.equal(before)

    def test_strict_rejects_nan(self):
        p = ParamSet()
        p.add("w", np.zeros(2))
        p.zero_grad()
        p.grads["w"][0] = np.nan
        with pytest.raises(NonFiniteError):
            SGD(0.1, strict=True).step(p)

    def test_sgd_descends(self):
        rng = np.random.default_rng(5)
        p = ParamSet()
        p.add("dec_W", rng.normal(size=(6, 3)))
        p.add("dec_b", np.zeros(6))
        dec = SoftmaxDecoder(p)
        c, t = rng.normal(size=(8, 3)), rng.integers(0, 6, size=8)
        p.zero_grad()
        before = dec.loss(c, t)
        dec.backward()
        SGD(1e-2).step(p)
        assert dec.loss(c, t) < before


class TestFiniteDifferenceChecker:
    def test_detects_wrong_gradient(self):
        p = ParamSet()
        p.add("w", np.array([1.0, 2.0]))
        p.zero_grad()
        p.grads["w"][:] = [-2.0, -4.0]  # sign flipped
        err = finite_difference_check(lambda: float(np.sum(p["w"] ** 2)), p)
        assert err == pytest.approx(2.0)

    def test_five_point_stencil_is_exact_on_quartics(self):
        p = ParamSet()
        p.add("w", np.array([0.7, -1.3]))
        p.zero_grad()
        p.grads["w"][:] = 4 * p["w"] ** 3
        err = finite_difference_check(lambda: float(np.sum(p["w"] ** 4)), p, epsilon=1e-2, stencil=5)
        assert err < 1e-12
        assert finite_difference_check(lambda: float(np.sum(p["w"] ** 4)), p, epsilon=1e-2) > 1e-5

    def test_paramset_grow(self):
        p = ParamSet()
        p.add("e", np.zeros((2, 3)))
        p.zero_grad()
        p.set("e", np.zeros((4, 3)))
        p.zero_grad()
        assert p.grads["e"].shape == (4, 3)
        assert p.num_params() == 12
