import numpy as np
import pytest

from meshsplat import gauss, rectifier
from meshsplat.errors import ConfigError
from meshsplat.rectifier import (EncoderConfig, RectifierParams, apply_deltas,
                                 apply_deltas_backward, init_rectifier,
                                 positional_encode, positional_encode_backward,
                                 rectify_backward, rectify_forward)


class TestPositionalEncode:
    def test_zero_input(self):
        cfg = EncoderConfig(num_bands=6, include_identity=False)
        feat = positional_encode(np.zeros((1, 3)), cfg)
        assert feat.shape == (1, 36)
        # per band: 3 sin entries then 3 cos entries
        feat = feat.reshape(6, 2, 3)
        np.testing.assert_array_equal(feat[:, 0, :], 0.0)
        np.testing.assert_array_equal(feat[:, 1, :], 1.0)

    def test_output_dim_matches_channel_accounting(self):
        cfg = EncoderConfig(num_bands=6, include_identity=False)
        assert cfg.output_dim == 36 == 105 - 69

    def test_identity_prepended(self):
        cfg = EncoderConfig(num_bands=2, include_identity=True)
        mu = np.array([[0.3, -0.2, 0.7]])
        feat = positional_encode(mu, cfg)
        assert feat.shape == (1, 15)
        np.testing.assert_array_equal(feat[:, :3], mu)

    def test_band0_periodicity(self):
        cfg = EncoderConfig(num_bands=6)
        mu = np.array([[0.37, -1.2, 0.05]])
        f1 = positional_encode(mu, cfg)
        f2 = positional_encode(mu + 2.0, cfg)
        np.testing.assert_allclose(f1[:, :6], f2[:, :6], atol=1e-9)

    def test_backward_fd(self):
        rng = np.random.default_rng(0)
        cfg = EncoderConfig(num_bands=6)
        mu = rng.normal(size=(4, 3))
        w = rng.normal(size=(4, 36))
        ana = positional_encode_backward(mu, cfg, w)
        h = 1e-6
        num = np.zeros_like(mu)
        it = np.nditer(mu, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            mp = mu.copy(); mp[idx] += h
            mm = mu.copy(); mm[idx] -= h
            num[idx] = (np.sum(w * positional_encode(mp, cfg))
                        - np.sum(w * positional_encode(mm, cfg))) / (2 * h)
        np.testing.assert_allclose(ana, num, rtol=1e-6, atol=1e-9)


def forward_oracle(params, x):
    """Straight-line re-implementation of the 5-layer skip MLP."""
    w, b = params.weights, params.biases
    h1 = np.maximum(x @ w[0].T + b[0], 0)
    h2 = np.maximum(h1 @ w[1].T + b[1], 0)
    h3 = np.maximum(h2 @ w[2].T + b[2], 0)
    h4 = np.maximum(np.concatenate([h3, x], axis=1) @ w[3].T + b[3], 0)
    return h4 @ w[4].T + b[4]


def random_params(seed):
    rng = np.random.default_rng(seed)
    params = init_rectifier(rng=rng)
    for i in range(len(params.weights)):
        params.weights[i] = rng.normal(size=params.weights[i].shape) * 0.2
        params.biases[i] = rng.normal(size=params.biases[i].shape) * 0.1
    return params


class TestRectifyForward:
    def test_zero_network(self):
        params = init_rectifier()
        for w in params.weights:
            w[:] = 0.0
        dmu, dr, ds = rectify_forward(params, np.random.default_rng(1).normal(size=(5, 3)),
                                      np.zeros(69))
        np.testing.assert_array_equal(dmu, 0.0)
        np.testing.assert_array_equal(dr, 0.0)
        np.testing.assert_array_equal(ds, 0.0)

    def test_zero_init_head_is_noop(self):
        params = init_rectifier(rng=np.random.default_rng(2))
        rng = np.random.default_rng(3)
        dmu, dr, ds = rectify_forward(params, rng.normal(size=(7, 3)),
                                      rng.normal(size=69))
        np.testing.assert_array_equal(dmu, 0.0)
        np.testing.assert_array_equal(dr, 0.0)
        np.testing.assert_array_equal(ds, 0.0)

    def test_constant_network(self):
        params = init_rectifier(rng=np.random.default_rng(4))
        for w in params.weights:
            w[:] = 0.0
        bias = np.arange(10, dtype=float) * 0.1
        params.biases[4] = bias.copy()
        rng = np.random.default_rng(5)
        for _ in range(3):
            dmu, dr, ds = rectify_forward(params, rng.normal(size=(2, 3)),
                                          rng.normal(size=69))
            np.testing.assert_allclose(np.concatenate([dmu, dr, ds], axis=1),
                                       np.tile(bias, (2, 1)), atol=1e-15)

    def test_straight_line_oracle(self):
        rng = np.random.default_rng(6)
        params = random_params(7)
        mu = rng.normal(size=(11, 3))
        pose = rng.normal(size=69)
        dmu, dr, ds = rectify_forward(params, mu, pose)
        feat = positional_encode(mu, params.encoder)
        x = np.concatenate([feat, np.tile(pose, (11, 1))], axis=1)
        expected = forward_oracle(params, x)
        got = np.concatenate([dmu, dr, ds], axis=1)
        np.testing.assert_allclose(got, expected, atol=1e-9)

    def test_deterministic(self):
        params = random_params(8)
        rng = np.random.default_rng(9)
        mu = rng.normal(size=(4, 3))
        pose = rng.normal(size=69)
        a = rectify_forward(params, mu, pose)
        b = rectify_forward(params, mu, pose)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_bad_pose_width(self):
        params = init_rectifier()
        with pytest.raises(ConfigError):
            rectify_forward(params, np.zeros((1, 3)), np.zeros(68))

    def test_bad_encoder_width(self):
        with pytest.raises(ConfigError):
            init_rectifier(EncoderConfig(num_bands=6, include_identity=True))


class TestApplyDeltas:
    def test_identity_rectification(self):
        rng = np.random.default_rng(10)
        mu = rng.normal(size=(3, 3))
        r = gauss.quat_normalize(rng.normal(size=(3, 4)))
        s = np.exp(rng.normal(size=(3, 3)))
        mu_p, r_p, s_p, nc = apply_deltas(mu, r, s, np.zeros((3, 3)),
                                          np.zeros((3, 4)), np.zeros((3, 3)))
        np.testing.assert_array_equal(mu_p, mu)
        np.testing.assert_array_equal(r_p, r)
        np.testing.assert_array_equal(s_p, s)
        assert nc == 0

    def test_pure_translation(self):
        mu = np.zeros((1, 3))
        r = np.array([[1.0, 0, 0, 0]])
        s = np.ones((1, 3))
        d = np.array([[0.01, 0.0, 0.0]])
        mu_p, _, _, _ = apply_deltas(mu, r, s, d, np.zeros((1, 4)), np.zeros((1, 3)))
        np.testing.assert_allclose(mu_p, mu + d, atol=1e-15)

    def test_quaternion_composition_oracle(self):
        # delta = components of a 10 degree rotation minus identity
        angle = np.deg2rad(10.0)
        q10 = np.array([np.cos(angle / 2), 0, 0, np.sin(angle / 2)])
        d_r = (q10 - gauss.QUAT_IDENTITY)[None, :]
        rng = np.random.default_rng(11)
        r_star = gauss.quat_normalize(rng.normal(size=(1, 4)))
        _, r_p, _, _ = apply_deltas(np.zeros((1, 3)), r_star, np.ones((1, 3)),
                                    np.zeros((1, 3)), d_r, np.zeros((1, 3)))
        expected = gauss.quat_multiply(r_star, q10[None, :])
        np.testing.assert_allclose(
            gauss.quat_to_matrix(r_p), gauss.quat_to_matrix(expected), atol=1e-6)

    def test_scale_floor_counted(self):
        s = np.array([[0.5, 0.5, 0.5]])
        ds = np.array([[-1.0, 0.0, 0.0]])
        _, _, s_p, nc = apply_deltas(np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]),
                                     s, np.zeros((1, 3)), np.zeros((1, 4)), ds)
        assert nc == 1
        assert s_p[0, 0] == rectifier.SCALE_FLOOR

    def test_rotation_stays_normalized(self):
        rng = np.random.default_rng(12)
        r = gauss.quat_normalize(rng.normal(size=(20, 4)))
        dr = rng.normal(size=(20, 4)) * 0.2
        _, r_p, _, _ = apply_deltas(np.zeros((20, 3)), r, np.ones((20, 3)),
                                    np.zeros((20, 3)), dr, np.zeros((20, 3)))
        np.testing.assert_allclose(np.linalg.norm(r_p, axis=1), 1.0, atol=1e-9)

    def test_backward_fd(self):
        rng = np.random.default_rng(13)
        mu = rng.normal(size=(2, 3))
        r = gauss.quat_normalize(rng.normal(size=(2, 4)))
        s = np.exp(rng.normal(size=(2, 3)))
        dmu = rng.normal(size=(2, 3)) * 0.1
        dr = rng.normal(size=(2, 4)) * 0.1
        ds = rng.normal(size=(2, 3)) * 0.1
        wm = rng.normal(size=(2, 3))
        wr = rng.normal(size=(2, 4))
        ws = rng.normal(size=(2, 3))

        def loss(mu_, r_, s_, dmu_, dr_, ds_):
            a, b, c, _ = apply_deltas(mu_, r_, s_, dmu_, dr_, ds_)
            return np.sum(wm * a) + np.sum(wr * b) + np.sum(ws * c)

        grads = apply_deltas_backward(mu, r, s, dmu, dr, ds, wm, wr, ws)
        args = [mu, r, s, dmu, dr, ds]
        h = 1e-6
        for ai, grad in zip(range(6), grads):
            arr = args[ai]
            num = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                ap = [a.copy() for a in args]; ap[ai][idx] += h
                am = [a.copy() for a in args]; am[ai][idx] -= h
                num[idx] = (loss(*ap) - loss(*am)) / (2 * h)
            np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-8)


class TestRectifyBackward:
    def test_zero_upstream_gradient(self):
        params = random_params(14)
        rng = np.random.default_rng(15)
        cache = {}
        rectify_forward(params, rng.normal(size=(3, 3)), rng.normal(size=69),
                        cache=cache)
        z = np.zeros((3, 3)), np.zeros((3, 4)), np.zeros((3, 3))
        pgrads, gmu = rectify_backward(params, cache, *z)
        for _, g in pgrads:
            np.testing.assert_array_equal(g, 0.0)
        np.testing.assert_array_equal(gmu, 0.0)

    def test_single_layer_least_squares_oracle(self):
        # one affine layer, L2 loss: dW = (y - t) x^T, db = sum(y - t)
        rng = np.random.default_rng(16)
        W = rng.normal(size=(10, 105))
        b = rng.normal(size=10)
        params = RectifierParams(weights=[W], biases=[b])
        mu = rng.normal(size=(6, 3))
        pose = rng.normal(size=69)
        cache = {}
        dmu, dr, ds = rectify_forward(params, mu, pose, cache=cache)
        y = np.concatenate([dmu, dr, ds], axis=1)
        t = rng.normal(size=y.shape)
        resid = y - t  # gradient of 0.5 * ||y - t||^2
        pgrads, _ = rectify_backward(params, cache, resid[:, 0:3],
                                     resid[:, 3:7], resid[:, 7:10])
        x = cache["x"]
        np.testing.assert_allclose(dict(pgrads)["w0"], resid.T @ x, atol=1e-9)
        np.testing.assert_allclose(dict(pgrads)["b0"], resid.sum(axis=0), atol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_full_network_finite_differences(self, seed):
        # rel. err < 1e-3 at h = 1e-4 on every parameter group
        params = random_params(100 + seed)
        rng = np.random.default_rng(200 + seed)
        mu = rng.normal(size=(3, 3))
        pose = rng.normal(size=69)
        wout = rng.normal(size=(3, 10))

        def loss_for(p):
            a, b, c = rectify_forward(p, mu, pose)
            return np.sum(wout * np.concatenate([a, b, c], axis=1))

        cache = {}
        rectify_forward(params, mu, pose, cache=cache)
        pgrads, gmu = rectify_backward(params, cache, wout[:, 0:3],
                                       wout[:, 3:7], wout[:, 7:10])
        pg = dict(pgrads)
        h = 1e-4
        rng_probe = np.random.default_rng(300 + seed)
        for i in range(5):
            for kind in ("w", "b"):
                name = f"{kind}{i}"
                arr = params.weights[i] if kind == "w" else params.biases[i]
                # probe a random subset of entries per group
                flat_idx = rng_probe.choice(arr.size, size=min(20, arr.size),
                                            replace=False)
                num = np.zeros(len(flat_idx))
                for j, fi in enumerate(flat_idx):
                    idx = np.unravel_index(fi, arr.shape)
                    orig = arr[idx]
                    arr[idx] = orig + h
                    lp = loss_for(params)
                    arr[idx] = orig - h
                    lm = loss_for(params)
                    arr[idx] = orig
                    num[j] = (lp - lm) / (2 * h)
                ana = pg[name].reshape(-1)[flat_idx]
                denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
                assert np.linalg.norm(ana - num) / denom < 1e-3, name
        # input-position gradient as well (drives the binding chain); smaller
        # step: band-5 encoder frequencies make h=1e-4 graze ReLU kinks
        h = 1e-6
        num_mu = np.zeros_like(mu)
        it = np.nditer(mu, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            mp = mu.copy(); mp[idx] += h
            mm = mu.copy(); mm[idx] -= h
            num_mu[idx] = (
                np.sum(wout * np.concatenate(rectify_forward(params, mp, pose), axis=1))
                - np.sum(wout * np.concatenate(rectify_forward(params, mm, pose), axis=1))
            ) / (2 * h)
        denom = max(np.linalg.norm(num_mu), np.linalg.norm(gmu), 1e-12)
        assert np.linalg.norm(gmu - num_mu) / denom < 1e-3
