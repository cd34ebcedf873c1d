"""Pose-conditioned rectification of Gaussian attributes.

A 5-layer MLP maps (encoded splat position, body-pose vector) to small
corrections (delta_mu, delta_r, delta_s) applied on top of the mesh-driven
binding. Input is 105 channels: 36 from a 6-band sin/cos positional encoding
and 69 from the flattened body pose. Hidden widths are 128, 164, 128 with the
encoder input re-concatenated at the fourth layer; the head is linear and
zero-initialized so rectification starts as an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gauss
from .errors import ConfigError

INPUT_DIM = 105
POSE_DIM = 69
OUTPUT_DIM = 10  # 3 position + 4 quaternion + 3 scale deltas
HIDDEN_WIDTHS = (128, 164, 128)
SKIP_LAYER = 3  # 0-based: the fourth affine layer re-reads the input
SCALE_FLOOR = 1e-6


@dataclass
class EncoderConfig:
    """Sin/cos frequency encoding of 3D positions, bands 2^k * pi."""

    num_bands: int = 6
    include_identity: bool = False

    @property
    def output_dim(self):
        return 3 * 2 * self.num_bands + (3 if self.include_identity else 0)


def positional_encode(mu, cfg: EncoderConfig):
    """Per band k: [sin(2^k pi x), sin .. y, sin .. z, cos .. x, cos .. y, cos .. z].

    The raw coordinates are prepended only when cfg.include_identity is set.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    n = mu.shape[0]
    parts = []
    if cfg.include_identity:
        parts.append(mu)
    for k in range(cfg.num_bands):
        arg = (2.0 ** k) * np.pi * mu
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))


def positional_encode_backward(mu, cfg: EncoderConfig, grad_feat):
    """VJP of positional_encode wrt the input positions."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    grad_mu = np.zeros_like(mu)
    col = 0
    if cfg.include_identity:
        grad_mu += grad_feat[:, col:col + 3]
        col += 3
    for k in range(cfg.num_bands):
        f = (2.0 ** k) * np.pi
        arg = f * mu
        grad_mu += grad_feat[:, col:col + 3] * np.cos(arg) * f
        col += 3
        grad_mu -= grad_feat[:, col:col + 3] * np.sin(arg) * f
        col += 3
    return grad_mu


@dataclass
class RectifierParams:
    """Weights and biases of the 5 affine layers, stored output-major (out, in)."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    @property
    def layer_dims(self):
        return [(w.shape[1], w.shape[0]) for w in self.weights]

    def flat_parameters(self):
        """Stable (name, array) listing used by the optimizer and checkpoints."""
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        return out


def init_rectifier(encoder: EncoderConfig | None = None, rng=None):
    """Fan-in-scaled uniform init for hidden layers; zero head.

    The zero head makes the first iteration render exactly the unrectified
    mesh-embedded Gaussians.
    """
    encoder = encoder or EncoderConfig()
    if encoder.output_dim + POSE_DIM != INPUT_DIM:
        raise ConfigError(
            f"encoder yields {encoder.output_dim} channels; with a {POSE_DIM}-wide "
            f"pose vector the network input must be {INPUT_DIM}")
    rng = rng or np.random.default_rng(0)
    dims_in = [INPUT_DIM, HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1],
               HIDDEN_WIDTHS[2] + INPUT_DIM, HIDDEN_WIDTHS[2]]
    dims_out = [HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1], HIDDEN_WIDTHS[2],
                HIDDEN_WIDTHS[2], OUTPUT_DIM]
    weights, biases = [], []
    for i, (din, dout) in enumerate(zip(dims_in, dims_out)):
        if i == len(dims_in) - 1:
            w = np.zeros((dout, din))
        else:
            bound = 1.0 / np.sqrt(din)
            w = rng.uniform(-bound, bound, size=(dout, din))
        weights.append(w)
        biases.append(np.zeros(dout))
    return RectifierParams(weights=weights, biases=biases, encoder=encoder)


def _check_input(x):
    if x.shape[1] != INPUT_DIM:
        raise ConfigError(f"rectifier input must have {INPUT_DIM} channels, "
                          f"got {x.shape[1]}")


def rectify_forward(params: RectifierParams, mu_star, pose_vec, cache=None):
    """Evaluate the MLP on every splat; returns (delta_mu, delta_r, delta_s).

    pose_vec is one 69-vector shared by all splats of the frame. Pass a dict
    as `cache` to retain intermediate activations for the backward pass.
    """
    mu_star = np.atleast_2d(mu_star)
    feat = positional_encode(mu_star, params.encoder)
    pose_vec = np.asarray(pose_vec, dtype=float).reshape(-1)
    if pose_vec.size != POSE_DIM:
        raise ConfigError(f"pose vector must have {POSE_DIM} channels, "
                          f"got {pose_vec.size}")
    x = np.concatenate([feat, np.tile(pose_vec, (mu_star.shape[0], 1))], axis=1)
    _check_input(x)
    h = x
    acts = [x]
    pre_relu = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if i == SKIP_LAYER:
            h = np.concatenate([h, x], axis=1)
            acts[-1] = h  # layer input actually consumed
        z = h @ w.T + b
        if i < len(params.weights) - 1:
            pre_relu.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
        acts.append(h)
    out = h
    if cache is not None:
        cache["inputs"] = acts[:-1]
        cache["pre_relu"] = pre_relu
        cache["x"] = x
        cache["mu_star"] = mu_star
    return out[:, 0:3], out[:, 3:7], out[:, 7:10]


def rectify_backward(params: RectifierParams, cache, grad_dmu, grad_dr, grad_ds):
    """VJP through the MLP and the positional encoding.

    Returns (param_grads, grad_mu_star) where param_grads mirrors
    params.flat_parameters() ordering.
    """
    grad_out = np.concatenate([grad_dmu, grad_dr, grad_ds], axis=1)
    inputs = cache["inputs"]
    pre_relu = cache["pre_relu"]
    x = cache["x"]
    n_layers = len(params.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    g = grad_out
    grad_x = np.zeros_like(x)
    for i in reversed(range(n_layers)):
        a_in = inputs[i]
        grad_w[i] = g.T @ a_in
        grad_b[i] = g.sum(axis=0)
        g_in = g @ params.weights[i]
        if i == SKIP_LAYER:
            grad_x += g_in[:, HIDDEN_WIDTHS[2]:]
            g_in = g_in[:, :HIDDEN_WIDTHS[2]]
        if i > 0:
            g = g_in * (pre_relu[i - 1] > 0)
        else:
            grad_x += g_in
    enc_dim = params.encoder.output_dim
    grad_mu_star = positional_encode_backward(
        cache["mu_star"], params.encoder, grad_x[:, :enc_dim])
    param_grads = []
    for i in range(n_layers):
        param_grads.append((f"w{i}", grad_w[i]))
        param_grads.append((f"b{i}", grad_b[i]))
    return param_grads, grad_mu_star


def apply_deltas(mu_star, r_star, s_star, d_mu, d_r, d_s):
    """Rectified attributes: mu' = mu* + dmu, r' = r* ∘ normalize(id + dr),
    s' = s* + ds floored at 1e-6.

    The quaternion delta is an increment about identity so a zero network
    leaves the rotation untouched. Returns (mu', r', s', n_clamped) where
    n_clamped counts scale components that hit the floor.
    """
    mu_p = mu_star + d_mu
    q_delta_raw = np.asarray(d_r, dtype=float) + gauss.QUAT_IDENTITY
    q_delta = gauss.quat_normalize(q_delta_raw)
    r_p = gauss.quat_multiply(r_star, q_delta)
    s_raw = s_star + d_s
    clamped = s_raw < SCALE_FLOOR
    s_p = np.where(clamped, SCALE_FLOOR, s_raw)
    return mu_p, r_p, s_p, int(np.count_nonzero(clamped))


def apply_deltas_backward(mu_star, r_star, s_star, d_mu, d_r, d_s,
                          grad_mu_p, grad_r_p, grad_s_p):
    """VJP of apply_deltas; floored scale components get zero gradient."""
    q_delta_raw = np.asarray(d_r, dtype=float) + gauss.QUAT_IDENTITY
    q_delta = gauss.quat_normalize(q_delta_raw)
    grad_r_star, grad_q_delta = gauss.quat_multiply_backward(
        r_star, q_delta, grad_r_p)
    grad_d_r = gauss.quat_normalize_backward(q_delta_raw, grad_q_delta)
    live = (s_star + d_s) >= SCALE_FLOOR
    grad_s = grad_s_p * live
    return (grad_mu_p.copy(), grad_r_star, grad_s,
            grad_mu_p.copy(), grad_d_r, grad_s.copy())
