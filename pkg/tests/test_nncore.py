import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdseq.nncore import (
    Gradients,
    ModelParams,
    NonFiniteError,
    SgdConfig,
    ShapeError,
    backward,
    forward,
    init_params,
    lr_at_epoch,
    mse_logits,
    sgd_step,
    softmax_cross_entropy,
)

from oracles import central_diff, loop_cross_entropy, loop_forward, rel_err


def _random_net(seed, dims):
    rng = np.random.default_rng(seed)
    p = init_params(seed, dims)
    return ModelParams(tuple((w, rng.normal(0, 0.1, b.shape)) for w, b in p.layers))


def _fd_check(params, x, loss_fn):
    dims = params.dims

    def f(theta):
        return loss_fn(forward(ModelParams.from_flat(dims, theta), x))[0]

    _, dl = loss_fn(forward(params, x))
    return rel_err(backward(params, x, dl).flat(), central_diff(f, params.flat()))


class TestInit:
    def test_deterministic(self):
        a, b = init_params(7, [2, 4, 3]), init_params(7, [2, 4, 3])
        assert a.equal(b)

    def test_biases_zero(self):
        p = init_params(123, [2, 3])
        assert np.all(p.layers[0][1] == 0.0)

    def test_fan_in_scale(self):
        p = init_params(7, [64, 64, 3])
        for w, _ in p.layers:
            expected = math.sqrt(2.0 / w.shape[0])
            assert abs(w.std() - expected) < 0.2 * expected

    def test_different_seeds_differ(self):
        assert not init_params(1, [3, 5, 2]).equal(init_params(2, [3, 5, 2]))

    @pytest.mark.parametrize("dims", [[3], [], [2, 0, 3], [0, 2]])
    def test_rejects_bad_dims(self, dims):
        with pytest.raises(ValueError):
            init_params(0, dims)


class TestForward:
    def test_identity(self):
        p = ModelParams(((np.eye(2), np.zeros(2)),))
        np.testing.assert_array_equal(forward(p, [[1.0, 2.0]]), [[1.0, 2.0]])

    def test_zero_net(self):
        p = ModelParams(((np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))))
        x = np.random.default_rng(0).normal(size=(5, 3))
        assert np.all(forward(p, x) == 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        p = _random_net(seed, [3, 6, 4])
        x = np.random.default_rng(seed + 10).normal(size=(7, 3))
        layers = [(w.tolist(), b.tolist()) for w, b in p.layers]
        np.testing.assert_allclose(forward(p, x), loop_forward(layers, x), rtol=1e-12, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            forward(init_params(0, [3, 2]), np.zeros((2, 4)))


class TestCrossEntropy:
    def test_uniform(self):
        loss, _ = softmax_cross_entropy([[0.0, 0.0]], [0])
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_saturated(self):
        loss, _ = softmax_cross_entropy([[100.0, 0.0]], [0])
        assert loss < 1e-6

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        logits, y = rng.normal(size=(6, 4)) * 3, rng.integers(0, 4, 6)
        assert softmax_cross_entropy(logits, y)[0] == pytest.approx(loop_cross_entropy(logits, y), rel=1e-12)

    def test_gradient_fd(self):
        rng = np.random.default_rng(11)
        logits, y = rng.normal(size=(4, 5)), rng.integers(0, 5, 4)
        _, d = softmax_cross_entropy(logits, y)
        fd = central_diff(lambda z: softmax_cross_entropy(z, y)[0], logits)
        assert rel_err(d, fd) < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy([[0.0, 1.0]], [2])

    def test_row_count_mismatch(self):
        with pytest.raises(ShapeError):
            softmax_cross_entropy(np.zeros((2, 3)), [0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
    def test_shift_invariance(self, seed, shift):
        rng = np.random.default_rng(seed)
        logits, y = rng.normal(size=(3, 4)) * 5, rng.integers(0, 4, 3)
        a = softmax_cross_entropy(logits, y)[0]
        b = softmax_cross_entropy(logits + shift, y)[0]
        assert abs(a - b) < 1e-9


class TestMse:
    def test_identical(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        loss, d = mse_logits(x, x.copy())
        assert loss == 0.0 and np.all(d == 0.0)

    def test_hand_value(self):
        loss, d = mse_logits([[1.0, 0.0]], [[0.0, 0.0]])
        assert loss == pytest.approx(0.5)
        np.testing.assert_allclose(d, [[1.0, 0.0]])
        fd = central_diff(lambda s: mse_logits(s, [[0.0, 0.0]])[0], np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(d, fd, atol=1e-8)

    def test_quadratic_homogeneity(self):
        rng = np.random.default_rng(1)
        s, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        base = mse_logits(s, t)[0]
        assert mse_logits(t + 2 * (s - t), t)[0] == pytest.approx(4 * base, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_logits(np.zeros((2, 3)), np.zeros((3, 2)))


class TestBackward:
    def test_zero_upstream(self):
        p = _random_net(0, [3, 5, 2])
        x = np.random.default_rng(0).normal(size=(4, 3))
        g = backward(p, x, np.zeros((4, 2)))
        assert isinstance(g, Gradients)
        assert np.all(g.flat() == 0.0)

    @pytest.mark.parametrize("seed", range(6))
    def test_ce_fd(self, seed):
        p = _random_net(seed, [3, 7, 5, 4])
        rng = np.random.default_rng(100 + seed)
        x, y = rng.normal(size=(5, 3)), rng.integers(0, 4, 5)
        assert _fd_check(p, x, lambda z: softmax_cross_entropy(z, y)) < 1e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_mse_fd(self, seed):
        p = _random_net(seed, [4, 6, 3])
        rng = np.random.default_rng(200 + seed)
        x, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))
        assert _fd_check(p, x, lambda z: mse_logits(z, t)) < 1e-4

    def test_composite_is_sum(self):
        p = _random_net(5, [3, 4, 3])
        rng = np.random.default_rng(5)
        x, y, t = rng.normal(size=(4, 3)), rng.integers(0, 3, 4), rng.normal(size=(4, 3))
        z = forward(p, x)
        _, d_ce = softmax_cross_entropy(z, y)
        _, d_mse = mse_logits(z, t)
        g_sum = backward(p, x, d_ce + d_mse).flat()
        np.testing.assert_allclose(g_sum, backward(p, x, d_ce).flat() + backward(p, x, d_mse).flat(),
                                   rtol=1e-12, atol=1e-14)

    def test_shape_mismatch(self):
        p = _random_net(0, [3, 2])
        with pytest.raises(ShapeError):
            backward(p, np.zeros((4, 3)), np.zeros((3, 2)))


class TestSgd:
    def test_zero_grad(self):
        p = _random_net(0, [3, 4, 2])
        g = Gradients(tuple((np.zeros_like(w), np.zeros_like(b)) for w, b in p.layers))
        assert sgd_step(p, g, 0.1).equal(p)

    def test_scalar(self):
        p = ModelParams(((np.array([[1.0]]), np.array([0.0])),))
        g = Gradients(((np.array([[2.0]]), np.array([0.0])),))
        assert sgd_step(p, g, 0.1).layers[0][0][0, 0] == pytest.approx(0.8)

    def test_two_steps_compose(self):
        rng = np.random.default_rng(2)
        p = _random_net(2, [3, 4, 2])
        g1, g2 = (Gradients(tuple((rng.normal(size=w.shape), rng.normal(size=b.shape)) for w, b in p.layers))
                  for _ in range(2))
        two = sgd_step(sgd_step(p, g1, 0.1), g2, 0.05)
        combined = p.flat() - 0.1 * g1.flat() - 0.05 * g2.flat()
        np.testing.assert_allclose(two.flat(), combined, rtol=1e-13, atol=1e-15)

    def test_non_finite(self):
        p = _random_net(0, [2, 2])
        g = Gradients(((np.full((2, 2), np.nan), np.zeros(2)),))
        with pytest.raises(NonFiniteError):
            sgd_step(p, g, 0.1)

    def test_bad_lr(self):
        p = _random_net(0, [2, 2])
        with pytest.raises(ValueError):
            sgd_step(p, p, 0.0)


class TestLrSchedule:
    def test_epoch_zero(self):
        assert lr_at_epoch(SgdConfig(0.1, 0.975), 0) == 0.1

    def test_no_decay(self):
        cfg = SgdConfig(0.3, gamma=1.0)
        assert all(lr_at_epoch(cfg, e) == 0.3 for e in range(cfg.epochs))

    def test_epoch_one(self):
        assert lr_at_epoch(SgdConfig(0.1, 0.975), 1) == pytest.approx(0.0975, rel=1e-14)

    @pytest.mark.parametrize("epoch", [-1, 200])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            lr_at_epoch(SgdConfig(0.1), epoch)

    @pytest.mark.parametrize("kw", [dict(initial_lr=0.0), dict(initial_lr=0.1, gamma=0.0),
                                    dict(initial_lr=0.1, gamma=1.5), dict(initial_lr=0.1, batch_size=0),
                                    dict(initial_lr=0.1, epochs=0), dict(initial_lr=0.1, seed=-1)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SgdConfig(**kw)


def test_params_flat_roundtrip():
    p = _random_net(9, [4, 3, 2])
    assert ModelParams.from_flat(p.dims, p.flat()).equal(p)
    assert p.size == 4 * 3 + 3 + 3 * 2 + 2
