import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trackinspect import NumericError, ShapeError
from trackinspect.netcore import (
    LayerParams, conv2d_backward, conv2d_valid, dropout, dropout_backward, finite_diff_check,
    hinge_forward_backward, load_checkpoint, lr_schedule, maxpool, maxpool_backward, relu,
    relu_backward, save_checkpoint, sgd_step, softmax_xent, CheckpointError,
)


def conv_reference(x, w, b, stride):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = x[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[ni, oi, i, j] = np.sum(patch * w[oi]) + b[oi]
    return out


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 6, 5))
        out, _ = conv2d_valid(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_ones_kernel_sums_to_nine(self):
        out, _ = conv2d_valid(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            conv2d_valid(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_matches_loop_reference(self, stride):
        rng = np.random.default_rng(stride)
        x = rng.normal(size=(2, 3, 9, 8))
        w = rng.normal(size=(4, 3, 3, 2))
        b = rng.normal(size=4)
        out, _ = conv2d_valid(x, w, b, stride)
        np.testing.assert_allclose(out, conv_reference(x, w, b, stride), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(h=st.integers(1, 20), k=st.integers(1, 7), s=st.integers(1, 4))
    def test_output_shape_formula(self, h, k, s):
        if h < k:
            with pytest.raises(ShapeError):
                conv2d_valid(np.zeros((1, 1, h, h)), np.zeros((1, 1, k, k)), stride=s)
            return
        out, _ = conv2d_valid(np.zeros((1, 1, h, h + 1)), np.zeros((2, 1, k, k)), stride=s)
        assert out.shape == (1, 2, (h - k) // s + 1, (h + 1 - k) // s + 1)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 1, 8, 8))
        w = rng.normal(size=(4, 1, 3, 3))
        b = rng.normal(size=4)
        out, cache = conv2d_valid(x, w, b, 2)
        r = rng.normal(size=out.shape)
        dx, dw, db = conv2d_backward(r, cache)
        f_x = lambda v: np.sum(conv2d_valid(v, w, b, 2)[0] * r)
        f_w = lambda v: np.sum(conv2d_valid(x, v, b, 2)[0] * r)
        f_b = lambda v: np.sum(conv2d_valid(x, w, v, 2)[0] * r)
        assert finite_diff_check(f_x, x, dx) <= 1e-6
        assert finite_diff_check(f_w, w, dw) <= 1e-6
        assert finite_diff_check(f_b, b, db) <= 1e-6

    @pytest.mark.parametrize("c,k", [(1, 3), (6, 5), (12, 3)])
    def test_layouts_and_unfold_paths_agree(self, c, k):
        # (6, 5) and (12, 3) exceed the small-kernel threshold and take the row-unfold path
        rng = np.random.default_rng(c * 10 + k)
        x = rng.normal(size=(3, c, 11, 10))
        w = rng.normal(size=(4, c, k, k))
        b = rng.normal(size=4)
        ref = conv_reference(x, w, b, 1)
        out, cache = conv2d_valid(x, w, b)
        np.testing.assert_allclose(out, ref, atol=1e-11)
        out_c, cache_c = conv2d_valid(x.transpose(1, 0, 2, 3), w, b, layout="CNHW")
        np.testing.assert_allclose(out_c.transpose(1, 0, 2, 3), ref, atol=1e-11)
        r = rng.normal(size=out.shape)
        dx, dw, db = conv2d_backward(r, cache)
        dxc, dwc, dbc = conv2d_backward(np.ascontiguousarray(r.transpose(1, 0, 2, 3)), cache_c)
        np.testing.assert_allclose(dxc.transpose(1, 0, 2, 3), dx, atol=1e-11)
        np.testing.assert_allclose(dwc, dw, atol=1e-11)
        np.testing.assert_allclose(dbc, db, atol=1e-11)
        f_x = lambda v: np.sum(conv2d_valid(v, w, b)[0] * r)
        f_w = lambda v: np.sum(conv2d_valid(x, v, b)[0] * r)
        # linear in both arguments, so a large step has no truncation error
        assert finite_diff_check(f_x, x, dx, eps=1e-3) <= 1e-6
        assert finite_diff_check(f_w, w, dw, eps=1e-3) <= 1e-6
        none_dx, dw2, _ = conv2d_backward(r, cache, need_dx=False)
        assert none_dx is None and np.array_equal(dw2, dw)


class TestMaxpool:
    def test_constant_input_routes_to_first_index(self):
        x = np.full((1, 1, 5, 5), 2.0)
        out, cache = maxpool(x, 3, 2)
        np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 2.0))
        dx = maxpool_backward(np.ones_like(out), cache)
        expected = np.zeros((5, 5))
        for i in (0, 2):
            for j in (0, 2):
                expected[i, j] += 1
        np.testing.assert_array_equal(dx[0, 0], expected)

    def test_increasing_grid_last_element_wins(self):
        x = np.arange(49, dtype=float).reshape(1, 1, 7, 7)
        out, _ = maxpool(x, 3, 2)
        np.testing.assert_array_equal(out[0, 0], [[16, 18, 20], [30, 32, 34], [44, 46, 48]])

    def test_window_too_large(self):
        with pytest.raises(ShapeError):
            maxpool(np.zeros((1, 1, 2, 5)), 3, 1)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_finite_differences_away_from_ties(self, stride):
        rng = np.random.default_rng(stride)
        # a permutation grid guarantees well-separated values (gap 1 >> eps)
        x = rng.permutation(2 * 9 * 9).reshape(1, 2, 9, 9).astype(float)
        out, cache = maxpool(x, 3, stride)
        r = rng.normal(size=out.shape)
        dx = maxpool_backward(r, cache)
        assert finite_diff_check(lambda v: np.sum(maxpool(v, 3, stride)[0] * r), x, dx) <= 1e-6


class TestRelu:
    def test_negative_zero_positive_identity(self):
        assert np.all(relu(-np.ones(4))[0] == 0)
        x = np.arange(1.0, 5.0)
        np.testing.assert_array_equal(relu(x)[0], x)

    def test_subgradient_at_zero(self):
        _, cache = relu(np.zeros(3))
        np.testing.assert_array_equal(relu_backward(np.ones(3), cache), 0)


class TestDropout:
    def test_identity_cases(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=100)
        np.testing.assert_array_equal(dropout(x, 0.0, True, rng)[0], x)
        np.testing.assert_array_equal(dropout(x, 0.5, False, rng)[0], x)

    def test_monte_carlo_rate_and_mean(self):
        rng = np.random.default_rng(42)
        x = np.ones(10**6)
        out, mask = dropout(x, 0.1, True, rng)
        assert abs(np.mean(out == 0) - 0.1) <= 0.002
        assert abs(out.mean() - 1.0) <= 0.005
        np.testing.assert_array_equal(dropout_backward(np.ones_like(x), mask), mask)

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            dropout(np.ones(3), 1.0, True, np.random.default_rng(0))


class TestSoftmaxXent:
    def test_uniform_logits_give_log_k(self):
        loss, _ = softmax_xent(np.zeros((1, 7)), np.array([3]))
        assert loss == pytest.approx(np.log(7), abs=1e-15)

    def test_confident_correct_class(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 50.0
        loss, _ = softmax_xent(logits, np.array([2]))
        assert loss < 1e-20

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(4, 6))
        labels = rng.integers(0, 6, size=4)
        _, grad = softmax_xent(logits, labels)
        assert finite_diff_check(lambda v: softmax_xent(v, labels)[0], logits, grad) <= 1e-6


class TestHinge:
    def test_margin_satisfied(self):
        w = np.array([1.0, 0.5])
        x = np.array([1.0, 2.0])  # w.x = 2
        loss, dw, db, dx = hinge_forward_backward(w, 0.0, 0.3, x, 1)
        assert loss == pytest.approx(0.15 * (w @ w))
        np.testing.assert_array_equal(dx, 0)
        np.testing.assert_allclose(dw, 0.3 * w)
        assert db == 0

    def test_zero_classifier(self):
        loss, _, db, _ = hinge_forward_backward(np.zeros(3), 0.0, 1.0, np.ones(3), 1)
        assert loss == 1.0
        assert db == -1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            hinge_forward_backward(np.zeros(3), 0.0, 1.0, np.ones(4), 1)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        checked = 0
        while checked < 20:
            w, x = rng.normal(size=6), rng.normal(size=6)
            b, y, lam = rng.normal(), rng.choice([-1, 1]), rng.uniform(0, 2)
            if abs(y * (w @ x + b) - 1) < 0.05:
                continue
            _, dw, db, dx = hinge_forward_backward(w, b, lam, x, y)
            assert finite_diff_check(lambda v: hinge_forward_backward(v, b, lam, x, y)[0], w, dw) <= 1e-6
            assert finite_diff_check(lambda v: hinge_forward_backward(w, b, lam, v, y)[0], x, dx) <= 1e-6
            bb = np.array([b])
            assert finite_diff_check(lambda v: hinge_forward_backward(w, v[0], lam, x, y)[0], bb,
                                     np.array([db])) <= 1e-6
            checked += 1


class TestSgd:
    def test_zero_gradient_is_noop(self):
        p = {"l": LayerParams(np.ones((2, 2)), np.ones(2))}
        sgd_step(p, {"l": (np.zeros((2, 2)), np.zeros(2))}, lr=0.1, momentum=0.9, weight_decay=0)
        np.testing.assert_array_equal(p["l"].weights, 1)

    def test_single_quadratic_step(self):
        p = {"l": LayerParams(np.array([1.0]), np.zeros(1))}
        sgd_step(p, {"l": (p["l"].weights.copy(), np.zeros(1))}, lr=0.1, momentum=0.0, weight_decay=0)
        assert p["l"].weights[0] == pytest.approx(0.9)

    def test_momentum_converges_on_convex_quadratic(self):
        # heavy-ball at momentum 0.9 contracts by at best sqrt(0.9) per step,
        # so 1e-6 from an O(1) start needs ~300 steps
        a = np.diag([1.0, 3.0])
        c = np.array([0.5, -2.0])
        target = np.linalg.solve(a, c)
        p = {"l": LayerParams(np.zeros(2), np.zeros(1))}
        for _ in range(300):
            g = a @ p["l"].weights - c
            sgd_step(p, {"l": (g, np.zeros(1))}, lr=0.1, momentum=0.9, weight_decay=0)
        np.testing.assert_allclose(p["l"].weights, target, atol=1e-6)

    def test_plain_descent_reduces_loss(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = rng.normal(size=(4, 4))
            a = m @ m.T + 0.1 * np.eye(4)
            big_l = np.linalg.eigvalsh(a).max()
            w = rng.normal(size=4)
            f = lambda v: 0.5 * v @ a @ v
            p = {"l": LayerParams(w.copy(), np.zeros(1))}
            sgd_step(p, {"l": (a @ w, np.zeros(1))}, lr=0.5 / big_l, momentum=0, weight_decay=0)
            assert f(p["l"].weights) < f(w)

    def test_weight_decay_multiplier_and_bias_exemption(self):
        p = {"l": LayerParams(np.array([2.0]), np.array([2.0]), wd_multiplier=10)}
        sgd_step(p, {"l": (np.zeros(1), np.zeros(1))}, lr=1.0, momentum=0, weight_decay=0.01)
        assert p["l"].weights[0] == pytest.approx(2.0 - 0.2)
        assert p["l"].biases[0] == 2.0

    def test_non_finite_gradient_aborts(self):
        p = {"l": LayerParams(np.ones(2), np.zeros(1))}
        with pytest.raises(NumericError):
            sgd_step(p, {"l": (np.array([np.nan, 0.0]), np.zeros(1))}, lr=0.1)
        np.testing.assert_array_equal(p["l"].weights, 1)


@pytest.mark.parametrize("it, lr", [(0, 0.01), (29_999, 0.01), (30_000, 0.005), (60_000, 0.0025)])
def test_lr_schedule(it, lr):
    assert lr_schedule(it) == pytest.approx(lr, rel=1e-15)


def test_linear_map_gradcheck_is_tight():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 5))
    r = rng.normal(size=3)
    x = rng.normal(size=5)
    assert finite_diff_check(lambda v: r @ (a @ v), x, a.T @ r) <= 1e-9


def test_relu_gradcheck_away_from_kink():
    rng = np.random.default_rng(2)
    x = rng.uniform(0.1, 1.0, size=50) * rng.choice([-1, 1], size=50)
    r = rng.normal(size=50)
    dx = relu_backward(r, relu(x)[1])
    assert finite_diff_check(lambda v: np.sum(relu(v)[0] * r), x, dx) <= 1e-7


class TestCheckpoint:
    def test_roundtrip_real_and_complex(self, tmp_path):
        t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3),
             "h": (np.arange(4) + 1j * np.arange(4)[::-1]).reshape(2, 2).astype(np.complex64)}
        arch = {"layers": [1, 2]}
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, t, arch, {"iteration": 7})
        back, meta, _ = load_checkpoint(path, arch)
        assert meta == {"iteration": 7}
        np.testing.assert_array_equal(back["a"], t["a"])
        np.testing.assert_array_equal(back["h"], t["h"])

    def test_arch_mismatch_and_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"a": np.zeros(1)}, {"x": 1})
        with pytest.raises(CheckpointError):
            load_checkpoint(path, {"x": 2})
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"nope" + bytes(40))
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)

    def test_little_endian_float32_payload(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"w": np.array([1.5], dtype=np.float32)}, {})
        raw = path.read_bytes()
        assert raw[:4] == b"TRKI"
        assert raw.endswith(np.array([1.5], dtype="<f4").tobytes())
