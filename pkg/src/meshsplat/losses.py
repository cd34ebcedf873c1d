"""Training losses and evaluation metrics.

Color terms: mean-absolute error and (1 - SSIM) over the rendered frame, with
a pluggable perceptual-loss slot that contributes zero unless registered.
Regularizers: local-position excess, scale excess, and rectification-offset
magnitude, each a mean of per-splat L2 norms. PSNR/SSIM double as evaluation
metrics. Every differentiable term has an analytic backward checked against
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10


def _check_same_shape(rendered, target):
    rendered = np.asarray(rendered, dtype=float)
    target = np.asarray(target, dtype=float)
    if rendered.shape != target.shape:
        raise ConfigError(
            f"image shape mismatch: {rendered.shape} vs {target.shape}")
    return rendered, target


def l1_loss(rendered, target):
    """Mean absolute per-channel difference."""
    rendered, target = _check_same_shape(rendered, target)
    return float(np.mean(np.abs(rendered - target)))


def l1_loss_backward(rendered, target):
    rendered, target = _check_same_shape(rendered, target)
    return np.sign(rendered - target) / rendered.size


def psnr(rendered, target):
    """10 log10(1 / MSE) with peak 1.0, capped at 100 dB."""
    rendered, target = _check_same_shape(rendered, target)
    mse = float(np.mean((rendered - target) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=float)
    w = np.exp(-(x ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return w / w.sum()

_SSIM_KERNEL = _gaussian_window()
_SSIM_HALF = SSIM_WINDOW // 2


def _filter_valid(img):
    """Separable window filter cropped to pixels with full support."""
    h = _SSIM_HALF
    out = correlate1d(img, _SSIM_KERNEL, axis=0, mode="constant")
    out = correlate1d(out, _SSIM_KERNEL, axis=1, mode="constant")
    return out[h:-h, h:-h]

def _filter_valid_adjoint(grad, shape):
    """Transpose of _filter_valid (the kernel is symmetric)."""
    h = _SSIM_HALF
    full = np.zeros(shape)
    full[h:-h, h:-h] = grad
    out = correlate1d(full, _SSIM_KERNEL, axis=0, mode="constant")
    return correlate1d(out, _SSIM_KERNEL, axis=1, mode="constant")


def _ssim_fields(x, y):
    mx = _filter_valid(x)
    my = _filter_valid(y)
    sxx = _filter_valid(x * x) - mx * mx
    syy = _filter_valid(y * y) - my * my
    sxy = _filter_valid(x * y) - mx * my
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return mx, my, sxx, syy, sxy, a1, a2, b1, b2


def ssim(rendered, target):
    """Mean SSIM over channels and fully-supported pixels; value in [-1, 1].

    11x11 Gaussian window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2.
    """
    rendered, target = _check_same_shape(rendered, target)
    if rendered.ndim == 2:
        rendered = rendered[..., None]
        target = target[..., None]
    H, W = rendered.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ConfigError(f"image {H}x{W} smaller than the {SSIM_WINDOW}-pixel window")
    total = 0.0
    for c in range(rendered.shape[2]):
        _, _, _, _, _, a1, a2, b1, b2 = _ssim_fields(rendered[:, :, c],
                                                     target[:, :, c])
        total += np.mean((a1 * a2) / (b1 * b2))
    return float(total / rendered.shape[2])


def ssim_loss(rendered, target):
    return 1.0 - ssim(rendered, target)


def ssim_backward(rendered, target):
    """Gradient of ssim(rendered, target) wrt the rendered image."""
    rendered, target = _check_same_shape(rendered, target)
    squeeze = rendered.ndim == 2
    if squeeze:
        rendered = rendered[..., None]
        target = target[..., None]
    H, W, C = rendered.shape
    grad = np.zeros_like(rendered)
    n_valid = (H - 2 * _SSIM_HALF) * (W - 2 * _SSIM_HALF)
    for c in range(C):
        x = rendered[:, :, c]
        y = target[:, :, c]
        mx, my, sxx, syy, sxy, a1, a2, b1, b2 = _ssim_fields(x, y)
        g = 1.0 / (n_valid * C)  # upstream of each valid S value
        d_a1 = g * a2 / (b1 * b2)
        d_a2 = g * a1 / (b1 * b2)
        d_b1 = -g * a1 * a2 / (b1 * b1 * b2)
        d_b2 = -g * a1 * a2 / (b1 * b2 * b2)
        d_mx = 2.0 * my * d_a1 + 2.0 * mx * d_b1
        d_sxx = d_b2
        d_sxy = 2.0 * d_a2
        # variance/covariance fields pull in the means too
        d_mx_total = d_mx - 2.0 * mx * d_sxx - my * d_sxy
        grad[:, :, c] = (_filter_valid_adjoint(d_mx_total, (H, W))
                         + 2.0 * x * _filter_valid_adjoint(d_sxx, (H, W))
                         + y * _filter_valid_adjoint(d_sxy, (H, W)))
    return grad[:, :, 0] if squeeze else grad


def ssim_loss_backward(rendered, target):
    return -ssim_backward(rendered, target)


# ---------------------------------------------------------------------------
# splat regularizers

def reg_pos(mu_local, eps_pos=1.0):
    """Mean over splats of || max(|mu| - eps, 0) ||_2.

    The threshold acts on coordinate magnitudes so drift is penalized
    symmetrically around the parent triangle.
    """
    mu_local = np.atleast_2d(np.asarray(mu_local, dtype=float))
    excess = np.maximum(np.abs(mu_local) - eps_pos, 0.0)
    return float(np.mean(np.linalg.norm(excess, axis=1)))


def reg_pos_backward(mu_local, eps_pos=1.0):
    mu_local = np.atleast_2d(np.asarray(mu_local, dtype=float))
    n = mu_local.shape[0]
    excess = np.maximum(np.abs(mu_local) - eps_pos, 0.0)
    norm = np.linalg.norm(excess, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.sign(mu_local) * excess / safe / n


def reg_scaling(scale, eps_scaling=0.6):
    """Mean over splats of || max(s - eps, 0) ||_2 on activated local scales."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    excess = np.maximum(scale - eps_scaling, 0.0)
    return float(np.mean(np.linalg.norm(excess, axis=1)))


def reg_scaling_backward(scale, eps_scaling=0.6):
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    n = scale.shape[0]
    excess = np.maximum(scale - eps_scaling, 0.0)
    norm = np.linalg.norm(excess, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return excess / safe / n


def reg_offset(d_mu, d_r, d_s):
    """Mean over splats of the L2 norm of the stacked 10-vector of deltas."""
    v = np.concatenate([np.atleast_2d(d_mu), np.atleast_2d(d_r),
                        np.atleast_2d(d_s)], axis=1)
    return float(np.mean(np.linalg.norm(v, axis=1)))


def reg_offset_backward(d_mu, d_r, d_s):
    v = np.concatenate([np.atleast_2d(d_mu), np.atleast_2d(d_r),
                        np.atleast_2d(d_s)], axis=1)
    n = v.shape[0]
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    g = v / safe / n
    return g[:, 0:3], g[:, 3:7], g[:, 7:10]


# ---------------------------------------------------------------------------
# weighted total

@dataclass
class LossWeights:
    rgb: float = 1.5
    ssim: float = 0.2
    lpips: float = 0.0   # perceptual slot; the published setting uses 0.05
    pos: float = 0.01
    scaling: float = 1.0
    offset: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(d):
        return LossWeights(**d)


TERM_ORDER = ("rgb", "ssim", "lpips", "pos", "scaling", "offset")


@dataclass
class LossReport:
    raw: dict
    weighted: dict
    total: float

    def csv_row(self):
        return ([self.raw[k] for k in TERM_ORDER]
                + [self.weighted[k] for k in TERM_ORDER] + [self.total])

    @staticmethod
    def csv_header():
        return ([f"raw_{k}" for k in TERM_ORDER]
                + [f"weighted_{k}" for k in TERM_ORDER] + ["total"])


def total_loss(l_rgb, l_ssim, l_pos, l_scaling, l_offset,
               weights: LossWeights, l_lpips=0.0):
    """Weighted sum in the fixed term order rgb, ssim, lpips, pos, scaling,
    offset; the lpips term is zero unless a perceptual plug-in supplied it."""
    raw = {"rgb": float(l_rgb), "ssim": float(l_ssim), "lpips": float(l_lpips),
           "pos": float(l_pos), "scaling": float(l_scaling),
           "offset": float(l_offset)}
    w = weights.to_dict()
    weighted = {k: w[k] * raw[k] for k in TERM_ORDER}
    total = 0.0
    for k in TERM_ORDER:
        total += weighted[k]
    return LossReport(raw=raw, weighted=weighted, total=total)
