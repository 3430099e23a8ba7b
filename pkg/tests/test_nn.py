import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prefnav import nn
from prefnav.errors import ConfigurationError, UsageError
from prefnav.gradcheck import LAYER_CASES, check_layer
from prefnav.selfsup import PROJECTOR_LAYERS, VISUAL_LAYERS, SterlingModel, ipt_layers


def dense_net(i=3, o=2, dtype=np.float64):
    return nn.build([dict(kind="dense", in_features=i, out_features=o)], (i,), seed=0, dtype=dtype)


def conv_reference(x, w, b):
    """Direct nested-loop 3x3 same-padded cross-correlation."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wd, w.shape[0]))
    for i in range(h):
        for j in range(wd):
            win = xp[:, i : i + 3, j : j + 3, :]  # n, 3, 3, c
            out[:, i, j, :] = np.einsum("nabc,ocab->no", win, w) + b
    return out


class TestLayers:
    def test_dense_identity(self):
        net = dense_net(3, 3)
        net.params[0]["weight"][:] = np.eye(3)
        net.params[0]["bias"][:] = 0
        x = np.array([[1.0, -2.0, 0.5]])
        np.testing.assert_array_equal(net(x), x)

    def test_relu(self):
        net = nn.build([dict(kind="relu")], (3,), dtype=np.float64)
        np.testing.assert_array_equal(net(np.array([[-1.0, 0.0, 2.0]])), [[0.0, 0.0, 2.0]])
        _, cache = net.forward(np.array([[-1.0, 0.5, 2.0]]))
        _, dx = net.backward(cache, np.ones((1, 3)))
        np.testing.assert_array_equal(dx, [[0.0, 1.0, 1.0]])

    def test_conv_delta_kernel_copies_input(self):
        net = nn.build([dict(kind="conv2d", in_channels=1, out_channels=1)], (5, 5, 1), dtype=np.float64)
        net.params[0]["weight"][:] = 0
        net.params[0]["weight"][0, 0, 1, 1] = 1.0
        x = np.random.default_rng(0).normal(size=(2, 5, 5, 1))
        np.testing.assert_allclose(net(x), x)

    def test_conv_matches_direct_loops(self):
        net = nn.build([dict(kind="conv2d", in_channels=3, out_channels=4)], (6, 7, 3), seed=2, dtype=np.float64)
        net.params[0]["bias"][:] = np.arange(4)
        x = np.random.default_rng(1).normal(size=(2, 6, 7, 3))
        np.testing.assert_allclose(net(x), conv_reference(x, net.params[0]["weight"], net.params[0]["bias"]), atol=1e-12)

    def test_dense_weight_gradient_is_outer_product(self):
        net = dense_net(3, 2)
        x = np.array([[1.0, 2.0, 3.0]])
        dy = np.array([[0.5, -1.0]])
        _, cache = net.forward(x)
        grads, _ = net.backward(cache, dy)
        np.testing.assert_allclose(grads["0.weight"], np.outer(dy[0], x[0]))
        np.testing.assert_allclose(grads["0.bias"], dy[0])

    def test_maxpool_routes_gradient_to_max(self):
        net = nn.build([dict(kind="maxpool2")], (2, 2, 1), dtype=np.float64)
        x = np.array([[[[1.0], [4.0]], [[2.0], [3.0]]]])
        np.testing.assert_array_equal(net(x), [[[[4.0]]]])
        _, cache = net.forward(x)
        _, dx = net.backward(cache, np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(dx[0, :, :, 0], [[0, 1], [0, 0]])

    def test_softplus_is_positive_and_stable(self):
        net = nn.build([dict(kind="softplus")], (4,), dtype=np.float64)
        y = net(np.array([[-800.0, -1.0, 0.0, 800.0]]))
        assert np.all(np.isfinite(y)) and np.all(y >= 0)
        np.testing.assert_allclose(y[0, 2], np.log(2.0))
        np.testing.assert_allclose(y[0, 3], 800.0)

    @pytest.mark.parametrize("kind", sorted(LAYER_CASES))
    def test_finite_differences(self, kind):
        r = check_layer(kind)
        assert r.passed, (kind, r.max_rel_error)


def test_l2_normalize():
    np.testing.assert_allclose(nn.l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    np.testing.assert_array_equal(nn.l2_normalize(np.zeros(3)), np.zeros(3))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)).filter(lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)))
def test_l2_normalize_idempotent(x):
    once = nn.l2_normalize(x)
    np.testing.assert_allclose(np.linalg.norm(once, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nn.l2_normalize(once), once, atol=1e-12)


@pytest.mark.parametrize("which", ["visual", "ipt", "projector"])
def test_full_encoder_gradients(which):
    """Central differences on 50 random parameters of each full network in float64."""
    specs, shape = {
        "visual": (VISUAL_LAYERS, (64, 64, 3)),
        "ipt": (ipt_layers(), (288,)),
        "projector": (PROJECTOR_LAYERS, (64,)),
    }[which]
    rng = np.random.default_rng(0)
    net = nn.build(specs, shape, seed=1, dtype=np.float64, name=which)
    x = rng.uniform(0, 1, size=(3,) + shape) if which == "visual" else rng.normal(size=(3,) + shape)
    y, cache = net.forward(x)
    proj = rng.normal(size=y.shape)
    grads, _ = net.backward(cache, proj)
    params = net.named_params()
    errs = nn.finite_difference_check(lambda: float(np.sum(proj * net.forward(x)[0])), params, grads, n_samples=50)
    assert errs.max() <= 1e-6


def test_parameter_counts():
    m = SterlingModel.create(0)
    assert 200_000 <= m.visual.n_params() <= 300_000
    assert 200_000 <= m.ipt.n_params() <= 300_000
    assert m.projector.n_params() == 64 * 128 + 128 + 128 * 128 + 128


class TestAdam:
    def test_single_step(self):
        state = nn.AdamState(lr=0.1, weight_decay=0.0)
        p = {"w": np.array([1.0])}
        nn.adam_step(state, p, {"w": np.array([1.0])})
        np.testing.assert_allclose(p["w"], [0.9], atol=1e-7)

    def test_zero_gradient_no_change(self):
        state = nn.AdamState(lr=0.1, weight_decay=0.0)
        p = {"w": np.array([1.0, -2.0])}
        for _ in range(5):
            nn.adam_step(state, p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_decoupled_weight_decay(self):
        state = nn.AdamState(lr=0.1, weight_decay=0.5)
        p = {"w": np.array([2.0])}
        for _ in range(3):
            nn.adam_step(state, p, {"w": np.zeros(1)})
        np.testing.assert_allclose(p["w"], 2.0 * (1 - 0.05) ** 3)

    def test_non_finite_rejected_unchanged(self):
        state = nn.AdamState(lr=0.1)
        p = {"a": np.array([1.0]), "b": np.array([2.0])}
        with pytest.raises(nn.NonFiniteGradientError):
            nn.adam_step(state, p, {"a": np.array([0.3]), "b": np.array([np.inf])})
        np.testing.assert_array_equal(p["a"], [1.0])
        assert state.step == 0 and not state.m

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            nn.adam_step(nn.AdamState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})

    def test_deterministic_training(self):
        def run():
            net = nn.build([dict(kind="dense", in_features=4, out_features=3), dict(kind="relu")], (4,), seed=5)
            opt = nn.Adam([net], lr=1e-2)
            rng = np.random.default_rng(0)
            for _ in range(10):
                x = rng.normal(size=(8, 4)).astype(np.float32)
                y, cache = net.forward(x)
                grads, _ = net.backward(cache, y)
                opt.step([grads])
            return net.named_params()

        a, b = run(), run()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


def test_stale_cache_is_rejected():
    net = dense_net()
    _, cache = net.forward(np.ones((1, 3)))
    opt = nn.Adam([net])
    grads, _ = net.backward(cache, np.ones((1, 2)))
    opt.step([grads])
    with pytest.raises(UsageError):
        net.backward(cache, np.ones((1, 2)))


def test_input_shape_mismatch():
    with pytest.raises(ConfigurationError):
        dense_net().forward(np.ones((1, 4)))


def test_unknown_layer_kind():
    with pytest.raises(ConfigurationError):
        nn.build([dict(kind="dropout")], (3,))


class TestWeightsFile:
    def test_round_trip_and_header(self, tmp_path):
        m = SterlingModel.create(3)
        path = tmp_path / "m.strl"
        m.save(path)
        raw = path.read_bytes()
        assert raw[:4] == b"STRL" and int.from_bytes(raw[4:8], "little") == 1
        back = SterlingModel.load(path)
        for k, v in m.arrays().items():
            np.testing.assert_array_equal(back.arrays()[k], v)

    def test_record_layout(self, tmp_path):
        path = tmp_path / "w.strl"
        nn.save_weights(path, {"ab": np.arange(6, dtype=np.float32).reshape(2, 3)})
        raw = path.read_bytes()
        assert raw[8:12] == (2).to_bytes(4, "little") and raw[12:14] == b"ab"
        assert raw[14:18] == (2).to_bytes(4, "little")
        assert raw[18:26] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        np.testing.assert_array_equal(np.frombuffer(raw[26:], "<f4"), np.arange(6))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.strl"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ConfigurationError):
            nn.load_weights(path)

    def test_shape_mismatch_on_load(self, tmp_path):
        path = tmp_path / "u.strl"
        nn.save_weights(path, {"0.weight": np.zeros((2, 2), np.float32), "0.bias": np.zeros(2, np.float32)})
        with pytest.raises(ConfigurationError):
            dense_net().load_named(nn.load_weights(path))
