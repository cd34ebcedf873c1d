"""End-to-end differentiable render of mesh-embedded splats for one frame,
and the matching backward chain onto every learnable parameter group.

Forward: pose the mesh, build per-face frames, bind splats to world space,
optionally rectify with the pose-conditioned network, build world covariances,
evaluate view-dependent color, project and composite. Backward retraces the
chain with the analytic VJPs of each module and also folds in the splat
regularizers, returning gradients keyed by optimizer group.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gauss, losses, meshrig, rasterizer, rectifier
from .gauss import GaussianSplats
from .losses import LossWeights
from .meshrig import Pose, RiggedMesh
from .rasterizer import Camera


@dataclass
class FrameCache:
    """Intermediates of render_frame needed by backward_frame."""

    posed_vertices: np.ndarray = None
    frames: meshrig.TriangleFrames = None
    q_frame: np.ndarray = None
    scale_local: np.ndarray = None
    mu_star: np.ndarray = None
    r_star: np.ndarray = None
    s_star: np.ndarray = None
    deltas: tuple = None
    rect_cache: dict = None
    mu_prime: np.ndarray = None
    r_prime: np.ndarray = None
    s_prime: np.ndarray = None
    n_scale_clamped: int = 0
    view_dir: np.ndarray = None
    view_dist: np.ndarray = None
    colors: np.ndarray = None
    opacities: np.ndarray = None
    cov_world: np.ndarray = None
    proj: rasterizer.ProjectedSplats = None
    output: rasterizer.RenderOutput = None


def render_frame(splats: GaussianSplats, mesh: RiggedMesh, pose: Pose,
                 camera: Camera, rect_params=None, cache: FrameCache = None):
    """Render one frame; pass a FrameCache to retain backward state."""
    c = cache if cache is not None else FrameCache()
    c.posed_vertices = meshrig.pose_mesh(mesh, pose)
    c.frames = meshrig.mesh_triangle_frames(mesh, c.posed_vertices)
    c.scale_local = splats.scale
    c.mu_star, c.r_star, c.s_star, c.q_frame = meshrig.bind_to_global(
        splats.mu_local, splats.rot_local, c.scale_local, c.frames,
        splats.parent_face)
    if rect_params is not None:
        pose_vec = pose.flat_body_vector(rectifier.POSE_DIM)
        c.rect_cache = {}
        d_mu, d_r, d_s = rectifier.rectify_forward(
            rect_params, c.mu_star, pose_vec, cache=c.rect_cache)
        c.deltas = (d_mu, d_r, d_s)
        c.mu_prime, c.r_prime, c.s_prime, c.n_scale_clamped = \
            rectifier.apply_deltas(c.mu_star, c.r_star, c.s_star, d_mu, d_r, d_s)
    else:
        c.deltas = None
        c.mu_prime, c.r_prime, c.s_prime = c.mu_star, c.r_star, c.s_star
        c.n_scale_clamped = 0
    c.cov_world = gauss.build_covariance(c.r_prime, c.s_prime)
    rel = c.mu_prime - camera.center
    c.view_dist = np.linalg.norm(rel, axis=1, keepdims=True)
    c.view_dir = rel / c.view_dist
    c.colors = gauss.sh_to_color(splats.sh_coeffs, c.view_dir, splats.sh_degree)
    c.opacities = splats.opacity
    c.proj = rasterizer.project_gaussians(c.mu_prime, c.cov_world, c.colors,
                                          c.opacities, camera)
    c.output = rasterizer.rasterize_forward(c.proj, camera)
    return c.output


@dataclass
class SplatGrads:
    """Gradients per optimizer group plus densification statistics."""

    mu_local: np.ndarray
    rot_local: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh_coeffs: np.ndarray
    rect_params: list = None            # [(name, grad)] or None
    view_grad_norm: np.ndarray = None   # (N,) view-space positional grad norms
    n_scale_clamped: int = 0


def frame_losses(output_color, target, splats: GaussianSplats,
                 cache: FrameCache, weights: LossWeights, perceptual=None,
                 eps_pos=1.0, eps_scaling=0.6):
    """All loss terms of one frame; returns (LossReport, grad_color_image).

    `perceptual` is the optional plug-in: callable(rendered, target) ->
    (value, grad_image). Without it the lpips slot is zero.
    """
    l_rgb = losses.l1_loss(output_color, target)
    l_ssim = losses.ssim_loss(output_color, target)
    l_pos = losses.reg_pos(splats.mu_local, eps_pos)
    l_scaling = losses.reg_scaling(cache.scale_local, eps_scaling)
    if cache.deltas is not None:
        l_offset = losses.reg_offset(*cache.deltas)
    else:
        l_offset = 0.0
    l_lpips = 0.0
    grad_percep = None
    if perceptual is not None and weights.lpips > 0:
        l_lpips, grad_percep = perceptual(output_color, target)
    report = losses.total_loss(l_rgb, l_ssim, l_pos, l_scaling, l_offset,
                               weights, l_lpips=l_lpips)
    grad_img = (weights.rgb * losses.l1_loss_backward(output_color, target)
                + weights.ssim * losses.ssim_loss_backward(output_color, target))
    if grad_percep is not None:
        grad_img = grad_img + weights.lpips * grad_percep
    return report, grad_img


def backward_frame(splats: GaussianSplats, camera: Camera, cache: FrameCache,
                   grad_color_image, weights: LossWeights, rect_params=None,
                   eps_pos=1.0, eps_scaling=0.6):
    """Backward chain from an image-space gradient to every parameter group.

    Also folds in the analytic gradients of the position/scaling/offset
    regularizers so the result is the gradient of the full weighted loss.
    """
    n = len(splats)
    raster_grads = rasterizer.rasterize_backward(cache.proj, camera,
                                                 grad_color_image)
    src = cache.proj.source_index
    # projection back to world mean / covariance
    g_mu_prime, g_cov_world = rasterizer.project_gaussians_backward(
        cache.mu_prime, cache.cov_world, camera, cache.proj,
        raster_grads["grad_mean2d"], raster_grads["grad_cov2d"])
    # color path: SH coefficients and view direction
    g_color = np.zeros((n, 3))
    g_color[src] = raster_grads["grad_color"]
    g_sh, g_dir = gauss.sh_to_color_backward(splats.sh_coeffs, cache.view_dir,
                                             splats.sh_degree, g_color)
    dot = np.sum(cache.view_dir * g_dir, axis=1, keepdims=True)
    g_mu_prime += (g_dir - cache.view_dir * dot) / cache.view_dist
    # opacity path
    g_alpha = np.zeros(n)
    g_alpha[src] = raster_grads["grad_alpha_base"]
    g_opacity_logit = g_alpha * cache.opacities * (1.0 - cache.opacities)
    # covariance factorization back to rectified rotation / scale
    g_r_prime, g_s_prime = gauss.build_covariance_backward(
        cache.r_prime, cache.s_prime, g_cov_world)
    # view-space positional gradient norms for density control (NDC units)
    half = np.array([camera.width / 2.0, camera.height / 2.0])
    view_norm = np.zeros(n)
    view_norm[src] = np.linalg.norm(raster_grads["grad_mean2d"] * half, axis=1)

    rect_grads = None
    if rect_params is not None:
        d_mu, d_r, d_s = cache.deltas
        (g_mu_star, g_r_star, g_s_star, g_dmu, g_dr, g_ds) = \
            rectifier.apply_deltas_backward(
                cache.mu_star, cache.r_star, cache.s_star, d_mu, d_r, d_s,
                g_mu_prime, g_r_prime, g_s_prime)
        # offset regularizer acts directly on the deltas
        ro_mu, ro_r, ro_s = losses.reg_offset_backward(d_mu, d_r, d_s)
        g_dmu = g_dmu + weights.offset * ro_mu
        g_dr = g_dr + weights.offset * ro_r
        g_ds = g_ds + weights.offset * ro_s
        rect_grads, g_mu_star_net = rectifier.rectify_backward(
            rect_params, cache.rect_cache, g_dmu, g_dr, g_ds)
        g_mu_star = g_mu_star + g_mu_star_net
    else:
        g_mu_star, g_r_star, g_s_star = g_mu_prime, g_r_prime, g_s_prime

    g_mu_local, g_rot_raw, g_scale_local = meshrig.bind_to_global_backward(
        splats.mu_local, splats.rot_local, cache.scale_local, cache.frames,
        splats.parent_face, cache.q_frame, g_mu_star, g_r_star, g_s_star)
    g_mu_local = g_mu_local + weights.pos * losses.reg_pos_backward(
        splats.mu_local, eps_pos)
    g_scale_local = g_scale_local + weights.scaling * losses.reg_scaling_backward(
        cache.scale_local, eps_scaling)
    g_log_scale = g_scale_local * cache.scale_local

    return SplatGrads(
        mu_local=g_mu_local,
        rot_local=g_rot_raw,
        log_scale=g_log_scale,
        opacity_logit=g_opacity_logit,
        sh_coeffs=g_sh,
        rect_params=rect_grads,
        view_grad_norm=view_norm,
        n_scale_clamped=cache.n_scale_clamped,
    )


def forward_backward(splats, mesh, pose, camera, target, weights,
                     rect_params=None, perceptual=None, eps_pos=1.0,
                     eps_scaling=0.6):
    """One full training step's math: render, losses, gradients."""
    cache = FrameCache()
    output = render_frame(splats, mesh, pose, camera, rect_params=rect_params,
                          cache=cache)
    report, grad_img = frame_losses(output.color, target, splats, cache,
                                    weights, perceptual=perceptual,
                                    eps_pos=eps_pos, eps_scaling=eps_scaling)
    grads = backward_frame(splats, camera, cache, grad_img, weights,
                           rect_params=rect_params, eps_pos=eps_pos,
                           eps_scaling=eps_scaling)
    return report, grads, output
