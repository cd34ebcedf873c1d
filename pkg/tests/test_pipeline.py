import numpy as np
import pytest

from meshsplat import gauss, pipeline, rectifier, synth
from meshsplat.losses import LossWeights
from meshsplat.pipeline import (FrameCache, backward_frame, forward_backward,
                                frame_losses, render_frame)


def render_scalar_loss(splats, mesh, pose, camera, target, weights, rect=None):
    cache = FrameCache()
    out = render_frame(splats, mesh, pose, camera, rect_params=rect, cache=cache)
    report, _ = frame_losses(out.color, target, splats, cache, weights)
    return report.total


class TestRenderFrame:
    def test_deterministic(self, tiny_scene):
        spec, mesh, splats, camera = tiny_scene
        pose = synth.pose_at_phase(spec, 0.3)
        a = render_frame(splats, mesh, pose, camera)
        b = render_frame(splats, mesh, pose, camera)
        np.testing.assert_array_equal(a.color, b.color)

    def test_zero_init_rectifier_is_bitexact_noop(self, tiny_scene):
        spec, mesh, splats, camera = tiny_scene
        pose = synth.pose_at_phase(spec, 0.45)
        rect = rectifier.init_rectifier(rng=np.random.default_rng(3))
        with_rect = render_frame(splats, mesh, pose, camera, rect_params=rect)
        without = render_frame(splats, mesh, pose, camera, rect_params=None)
        np.testing.assert_array_equal(with_rect.color, without.color)
        np.testing.assert_array_equal(with_rect.alpha, without.alpha)
        np.testing.assert_array_equal(with_rect.contributors, without.contributors)

    def test_nonzero_rectifier_changes_render(self, tiny_scene):
        spec, mesh, splats, camera = tiny_scene
        pose = synth.pose_at_phase(spec, 0.45)
        rect = rectifier.init_rectifier(rng=np.random.default_rng(3))
        rng = np.random.default_rng(4)
        rect.weights[4] = rng.normal(scale=0.02, size=rect.weights[4].shape)
        moved = render_frame(splats, mesh, pose, camera, rect_params=rect)
        baseline = render_frame(splats, mesh, pose, camera)
        assert np.abs(moved.color - baseline.color).max() > 1e-6


class TestFrameLosses:
    def test_perfect_render_zero_color_loss(self, tiny_scene):
        spec, mesh, splats, camera = tiny_scene
        pose = synth.pose_at_phase(spec, 0.0)
        cache = FrameCache()
        out = render_frame(splats, mesh, pose, camera, cache=cache)
        report, grad = frame_losses(out.color, out.color.copy(), splats, cache,
                                    LossWeights())
        assert report.raw["rgb"] == 0.0
        assert report.raw["ssim"] == pytest.approx(0.0, abs=1e-12)
        assert report.raw["offset"] == 0.0

    def test_perceptual_plugin_slot(self, tiny_scene):
        spec, mesh, splats, camera = tiny_scene
        pose = synth.pose_at_phase(spec, 0.0)
        cache = FrameCache()
        out = render_frame(splats, mesh, pose, camera, cache=cache)
        target = np.zeros_like(out.color)

        def fake_perceptual(rendered, tgt):
            return 0.25, np.ones_like(rendered)

        weights = LossWeights(lpips=0.05)
        rep, grad = frame_losses(out.color, target, splats, cache, weights,
                                 perceptual=fake_perceptual)
        assert rep.raw["lpips"] == 0.25
        assert rep.weighted["lpips"] == pytest.approx(0.0125)
        rep0, grad0 = frame_losses(out.color, target, splats, cache,
                                   LossWeights(), perceptual=fake_perceptual)
        assert rep0.weighted["lpips"] == 0.0
        np.testing.assert_allclose(grad - grad0, 0.05, atol=1e-12)


class TestFullChainGradients:
    @pytest.mark.parametrize("use_rect", [False, True])
    def test_every_group_matches_finite_differences(self, tiny_scene, use_rect):
        spec, mesh, splats_full, camera = tiny_scene
        splats = splats_full.copy()
        # shrink to a handful of splats for FD cost
        keep = np.arange(0, len(splats), 7)
        splats = gauss.GaussianSplats(
            mu_local=splats.mu_local[keep] * 0.3,
            rot_local=splats.rot_local[keep],
            log_scale=splats.log_scale[keep],
            opacity_logit=splats.opacity_logit[keep],
            sh_coeffs=splats.sh_coeffs[keep],
            parent_face=splats.parent_face[keep],
            sh_degree=splats.sh_degree)
        pose = synth.pose_at_phase(spec, 0.15)
        rng = np.random.default_rng(5)
        target = rng.uniform(0.2, 0.8, size=(camera.height, camera.width, 3))
        weights = LossWeights()
        rect = None
        if use_rect:
            rect = rectifier.init_rectifier(rng=np.random.default_rng(6))
            for i in range(5):
                rect.weights[i] = np.random.default_rng(60 + i).normal(
                    scale=0.03, size=rect.weights[i].shape)

        report, grads, _ = forward_backward(splats, mesh, pose, camera, target,
                                            weights, rect_params=rect)

        def loss_with(**over):
            sp = splats.copy()
            for k, v in over.items():
                if k == "rect":
                    return render_scalar_loss(sp, mesh, pose, camera, target,
                                              weights, rect=v)
                setattr(sp, k, v)
            return render_scalar_loss(sp, mesh, pose, camera, target, weights,
                                      rect=rect)

        h = 1e-5
        checks = [
            ("mu_local", splats.mu_local, grads.mu_local),
            ("rot_local", splats.rot_local, grads.rot_local),
            ("log_scale", splats.log_scale, grads.log_scale),
            ("opacity_logit", splats.opacity_logit, grads.opacity_logit),
            ("sh_coeffs", splats.sh_coeffs, grads.sh_coeffs),
        ]
        for name, arr, ana in checks:
            num_h = self._fd(lambda a: loss_with(**{name: a}), arr, h)
            num_h2 = self._fd(lambda a: loss_with(**{name: a}), arr, h / 2)
            gscale = max(np.max(np.abs(num_h2)), 1e-9)
            clean = np.abs(num_h - num_h2) < 3e-3 * gscale
            assert clean.mean() > 0.7, f"{name}: kink contamination"
            denom = max(np.linalg.norm(num_h2[clean]), np.linalg.norm(ana[clean]),
                        1e-12)
            rel = np.linalg.norm((ana - num_h2)[clean]) / denom
            assert rel < 1e-2, f"{name}: rel err {rel:.2e}"

        if use_rect:
            pg = dict(grads.rect_params)
            rng_probe = np.random.default_rng(7)
            for i in (0, 4):
                arr = rect.weights[i]
                idxs = rng_probe.choice(arr.size, size=12, replace=False)
                for fi in idxs:
                    idx = np.unravel_index(fi, arr.shape)
                    orig = arr[idx]
                    arr[idx] = orig + h
                    lp = loss_with(rect=rect)
                    arr[idx] = orig - h
                    lm = loss_with(rect=rect)
                    arr[idx] = orig
                    num = (lp - lm) / (2 * h)
                    ana = pg[f"w{i}"][idx]
                    assert abs(ana - num) < 2e-2 * max(abs(num), abs(ana), 1e-4), \
                        f"w{i}[{idx}]: {ana} vs {num}"

    @staticmethod
    def _fd(f, x, h):
        g = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            xp = x.copy(); xp[idx] += h
            xm = x.copy(); xm[idx] -= h
            g[idx] = (f(xp) - f(xm)) / (2 * h)
        return g


class TestViewGradNorms:
    def test_nonzero_for_visible_splats(self, tiny_scene):
        spec, mesh, splats, camera = tiny_scene
        pose = synth.pose_at_phase(spec, 0.0)
        rng = np.random.default_rng(8)
        target = rng.uniform(size=(camera.height, camera.width, 3))
        _, grads, out = forward_backward(splats, mesh, pose, camera, target,
                                         LossWeights())
        assert grads.view_grad_norm.shape == (len(splats),)
        assert np.any(grads.view_grad_norm > 0)
        assert np.all(grads.view_grad_norm >= 0)
