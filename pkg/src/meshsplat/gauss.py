"""Gaussian primitive math: quaternions, covariance factorization, spherical
harmonics color, and parameter activations.

All operations are pure functions on numpy arrays and broadcast over leading
dimensions, so a single splat and a batch of N splats go through the same code.
Functions with a ``*_backward`` companion implement the exact vector-Jacobian
product of their forward pass; every one of them is checked against central
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateRotationError, InvalidScaleError

QUAT_NORM_EPS = 1e-12
QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# activations

def scale_activation(log_scale):
    """exp: unconstrained log-scale -> strictly positive scale."""
    return np.exp(log_scale)


def scale_inverse_activation(scale):
    scale = np.asarray(scale, dtype=float)
    if np.any(scale <= 0):
        raise InvalidScaleError("scale must be strictly positive")
    return np.log(scale)


def opacity_activation(logit):
    """Numerically stable logistic sigmoid -> (0, 1)."""
    logit = np.asarray(logit, dtype=float)
    out = np.empty_like(logit)
    pos = logit >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logit[pos]))
    ez = np.exp(logit[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def opacity_inverse_activation(opacity):
    opacity = np.asarray(opacity, dtype=float)
    if np.any((opacity <= 0) | (opacity >= 1)):
        raise InvalidScaleError("opacity must lie strictly inside (0, 1)")
    return np.log(opacity) - np.log1p(-opacity)


# ---------------------------------------------------------------------------
# quaternions (scalar-first: w, x, y, z)

def quat_normalize(q):
    """Return q / |q|; raises on (near-)zero norm."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < QUAT_NORM_EPS):
        raise DegenerateRotationError("quaternion norm below 1e-12")
    return q / norm


def quat_normalize_backward(q_raw, grad_unit):
    """VJP of quat_normalize: grad wrt the raw (unnormalized) quaternion."""
    q_raw = np.asarray(q_raw, dtype=float)
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    u = q_raw / norm
    # d(q/|q|)/dq = (I - u u^T) / |q|
    dot = np.sum(u * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - u * dot) / norm


def quat_to_matrix(q):
    """Rotation matrix of a quaternion, normalizing internally.

    Returns R with R^T R = I and det R = +1 for any nonzero q.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix_backward(q_raw, grad_R):
    """VJP of quat_to_matrix wrt the raw quaternion (includes normalize)."""
    q = quat_normalize(q_raw)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = grad_R
    zero = np.zeros_like(w)
    # dR/dw, dR/dx, dR/dy, dR/dz for the normalized quaternion
    dw = np.stack([
        zero, -2 * z, 2 * y,
        2 * z, zero, -2 * x,
        -2 * y, 2 * x, zero,
    ], axis=-1).reshape(q.shape[:-1] + (3, 3))
    dx = np.stack([
        zero, 2 * y, 2 * z,
        2 * y, -4 * x, -2 * w,
        2 * z, 2 * w, -4 * x,
    ], axis=-1).reshape(q.shape[:-1] + (3, 3))
    dy = np.stack([
        -4 * y, 2 * x, 2 * w,
        2 * x, zero, 2 * z,
        -2 * w, 2 * z, -4 * y,
    ], axis=-1).reshape(q.shape[:-1] + (3, 3))
    dz = np.stack([
        -4 * z, -2 * w, 2 * x,
        2 * w, -4 * z, 2 * y,
        2 * x, 2 * y, zero,
    ], axis=-1).reshape(q.shape[:-1] + (3, 3))
    grad_unit = np.stack([
        np.sum(g * dw, axis=(-2, -1)),
        np.sum(g * dx, axis=(-2, -1)),
        np.sum(g * dy, axis=(-2, -1)),
        np.sum(g * dz, axis=(-2, -1)),
    ], axis=-1)
    return quat_normalize_backward(q_raw, grad_unit)


def quat_multiply(a, b):
    """Hamilton product a * b; composes the corresponding rotations."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    for q in (a, b):
        if np.any(np.linalg.norm(q, axis=-1) < QUAT_NORM_EPS):
            raise DegenerateRotationError("quaternion norm below 1e-12")
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_multiply_backward(a, b, grad_c):
    """VJP of quat_multiply for both factors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    gw, gx, gy, gz = grad_c[..., 0], grad_c[..., 1], grad_c[..., 2], grad_c[..., 3]
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    grad_a = np.stack([
        gw * bw + gx * bx + gy * by + gz * bz,
        -gw * bx + gx * bw - gy * bz + gz * by,
        -gw * by + gx * bz + gy * bw - gz * bx,
        -gw * bz - gx * by + gy * bx + gz * bw,
    ], axis=-1)
    grad_b = np.stack([
        gw * aw + gx * ax + gy * ay + gz * az,
        -gw * ax + gx * aw + gy * az - gz * ay,
        -gw * ay - gx * az + gy * aw + gz * ax,
        -gw * az + gx * ay - gy * ax + gz * aw,
    ], axis=-1)
    return grad_a, grad_b


def quat_from_matrix(R):
    """Unit quaternion of a rotation matrix (Shepperd's branching method)."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    Rf = R.reshape((-1, 3, 3))
    n = Rf.shape[0]
    q = np.empty((n, 4))
    tr = Rf[:, 0, 0] + Rf[:, 1, 1] + Rf[:, 2, 2]
    for i in range(n):
        m = Rf[i]
        if tr[i] > 0:
            s = np.sqrt(tr[i] + 1.0) * 2
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s,
                    (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                    (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] >= m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                    0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                    (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return q.reshape(batch + (4,))


# ---------------------------------------------------------------------------
# covariance

def build_covariance(q, scale):
    """Sigma = R diag(s) diag(s)^T R^T; symmetric positive semi-definite."""
    scale = np.asarray(scale, dtype=float)
    if np.any(scale <= 0):
        raise InvalidScaleError("covariance scale must be strictly positive")
    R = quat_to_matrix(q)
    RS = R * scale[..., None, :]
    return RS @ np.swapaxes(RS, -1, -2)


def build_covariance_backward(q_raw, scale, grad_sigma):
    """VJP of build_covariance wrt raw quaternion and (activated) scale.

    grad_sigma may be any full 3x3 upstream gradient; the symmetric part is
    what acts, since Sigma is symmetric by construction.
    """
    scale = np.asarray(scale, dtype=float)
    R = quat_to_matrix(q_raw)
    gs = 0.5 * (grad_sigma + np.swapaxes(grad_sigma, -1, -2))
    D = scale[..., None, :] ** 2 * np.eye(3)
    grad_R = 2.0 * gs @ R @ D
    RtGR = np.swapaxes(R, -1, -2) @ gs @ R
    diag = np.diagonal(RtGR, axis1=-2, axis2=-1)
    grad_scale = 2.0 * scale * diag
    grad_q = quat_to_matrix_backward(q_raw, grad_R)
    return grad_q, grad_scale


def cov3_to_upper(sigma):
    """Pack a symmetric 3x3 into its 6 upper-triangular scalars."""
    sigma = np.asarray(sigma, dtype=float)
    return np.stack([sigma[..., 0, 0], sigma[..., 0, 1], sigma[..., 0, 2],
                     sigma[..., 1, 1], sigma[..., 1, 2], sigma[..., 2, 2]], axis=-1)


def upper_to_cov3(u):
    u = np.asarray(u, dtype=float)
    sigma = np.empty(u.shape[:-1] + (3, 3))
    sigma[..., 0, 0] = u[..., 0]
    sigma[..., 0, 1] = sigma[..., 1, 0] = u[..., 1]
    sigma[..., 0, 2] = sigma[..., 2, 0] = u[..., 2]
    sigma[..., 1, 1] = u[..., 3]
    sigma[..., 1, 2] = sigma[..., 2, 1] = u[..., 4]
    sigma[..., 2, 2] = u[..., 5]
    return sigma


# ---------------------------------------------------------------------------
# spherical harmonics (real basis, graphics convention, degrees 0..3)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

MAX_SH_DEGREE = 3


def num_sh_coeffs(degree):
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ConfigError(f"SH degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    return (degree + 1) ** 2


def sh_basis(view_dir, degree):
    """SH basis values at unit directions; shape (..., (degree+1)^2)."""
    d = np.asarray(view_dir, dtype=float)
    n = num_sh_coeffs(degree)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (n,))
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(view_dir, degree):
    """d(basis)/d(direction) treating the basis as polynomials on R^3.

    Shape (..., n_coeffs, 3). The radial component is projected out later by
    the normalize backward, so raw polynomial partials are exact here.
    """
    d = np.asarray(view_dir, dtype=float)
    n = num_sh_coeffs(degree)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(d.shape[:-1] + (n, 3))
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = SH_C2[2] * (-2 * x)
        g[..., 6, 1] = SH_C2[2] * (-2 * y)
        g[..., 6, 2] = SH_C2[2] * 4 * z
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = SH_C2[4] * 2 * x
        g[..., 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        g[..., 9, 0] = SH_C3[0] * 6 * x * y
        g[..., 9, 1] = SH_C3[0] * (3 * x * x - 3 * y * y)
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4 * z * z - x * x - 3 * y * y)
        g[..., 11, 2] = SH_C3[2] * 8 * y * z
        g[..., 12, 0] = SH_C3[3] * (-6 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6 * z * z - 3 * x * x - 3 * y * y)
        g[..., 13, 0] = SH_C3[4] * (4 * z * z - 3 * x * x - y * y)
        g[..., 13, 1] = SH_C3[4] * (-2 * x * y)
        g[..., 13, 2] = SH_C3[4] * 8 * x * z
        g[..., 14, 0] = SH_C3[5] * 2 * x * z
        g[..., 14, 1] = SH_C3[5] * (-2 * y * z)
        g[..., 14, 2] = SH_C3[5] * (x * x - y * y)
        g[..., 15, 0] = SH_C3[6] * (3 * x * x - 3 * y * y)
        g[..., 15, 1] = SH_C3[6] * (-6 * x * y)
    del zero
    return g


def sh_to_color(sh_coeffs, view_dir, degree):
    """Evaluate view-dependent RGB: clamp(sum_k c_k Y_k(d) + 0.5, 0, 1).

    sh_coeffs has shape (..., 3, n_coeffs) with n_coeffs = (degree+1)^2.
    """
    sh_coeffs = np.asarray(sh_coeffs, dtype=float)
    n = num_sh_coeffs(degree)
    if sh_coeffs.shape[-1] != n:
        raise ConfigError(
            f"expected {n} SH coefficients for degree {degree}, "
            f"got {sh_coeffs.shape[-1]}")
    basis = sh_basis(view_dir, degree)
    raw = np.einsum("...ck,...k->...c", sh_coeffs, basis) + 0.5
    return np.clip(raw, 0.0, 1.0)


def sh_to_color_backward(sh_coeffs, view_dir, degree, grad_color):
    """VJP of sh_to_color: gradients wrt coefficients and (unit) direction.

    Clamped channels pass zero gradient, matching the forward clip.
    """
    sh_coeffs = np.asarray(sh_coeffs, dtype=float)
    basis = sh_basis(view_dir, degree)
    raw = np.einsum("...ck,...k->...c", sh_coeffs, basis) + 0.5
    live = ((raw > 0.0) & (raw < 1.0)).astype(float)
    g = grad_color * live
    grad_sh = g[..., :, None] * basis[..., None, :]
    bgrad = sh_basis_grad(view_dir, degree)
    grad_dir = np.einsum("...c,...ck,...kd->...d", g, sh_coeffs, bgrad)
    return grad_sh, grad_dir


# ---------------------------------------------------------------------------
# splat container

@dataclass
class GaussianSplats:
    """Structure-of-arrays container for N mesh-embedded Gaussian primitives.

    Stored parameters are raw/unconstrained: positions live in the parent
    triangle's local frame, quaternions are unnormalized, scales are logs and
    opacity is a logit. Activations happen on read.
    """

    mu_local: np.ndarray        # (N, 3)
    rot_local: np.ndarray       # (N, 4) raw quaternion, normalized on read
    log_scale: np.ndarray       # (N, 3)
    opacity_logit: np.ndarray   # (N,)
    sh_coeffs: np.ndarray       # (N, 3, K)
    parent_face: np.ndarray     # (N,) int64
    sh_degree: int = 3

    def __post_init__(self):
        self.mu_local = np.atleast_2d(np.asarray(self.mu_local, dtype=float))
        self.rot_local = np.atleast_2d(np.asarray(self.rot_local, dtype=float))
        self.log_scale = np.atleast_2d(np.asarray(self.log_scale, dtype=float))
        self.opacity_logit = np.atleast_1d(np.asarray(self.opacity_logit, dtype=float))
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=float)
        self.parent_face = np.atleast_1d(np.asarray(self.parent_face, dtype=np.int64))

    def __len__(self):
        return self.mu_local.shape[0]

    @property
    def scale(self):
        return scale_activation(self.log_scale)

    @property
    def opacity(self):
        return opacity_activation(self.opacity_logit)

    @property
    def rotation(self):
        return quat_normalize(self.rot_local)

    def validate(self, n_faces=None):
        n = len(self)
        for name, arr, shape in [
            ("mu_local", self.mu_local, (n, 3)),
            ("rot_local", self.rot_local, (n, 4)),
            ("log_scale", self.log_scale, (n, 3)),
            ("opacity_logit", self.opacity_logit, (n,)),
            ("parent_face", self.parent_face, (n,)),
        ]:
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
        k = num_sh_coeffs(self.sh_degree)
        if self.sh_coeffs.shape != (n, 3, k):
            raise ConfigError(
                f"sh_coeffs has shape {self.sh_coeffs.shape}, expected {(n, 3, k)}")
        if not np.all(np.isfinite(self.mu_local)) or not np.all(np.isfinite(self.log_scale)):
            raise ConfigError("non-finite splat parameters")
        if np.any(np.linalg.norm(self.rot_local, axis=-1) < QUAT_NORM_EPS):
            raise DegenerateRotationError("splat quaternion with zero norm")
        if n_faces is not None and n > 0:
            if self.parent_face.min() < 0 or self.parent_face.max() >= n_faces:
                raise ConfigError("parent_face index out of range")

    def copy(self):
        return GaussianSplats(
            mu_local=self.mu_local.copy(),
            rot_local=self.rot_local.copy(),
            log_scale=self.log_scale.copy(),
            opacity_logit=self.opacity_logit.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            parent_face=self.parent_face.copy(),
            sh_degree=self.sh_degree,
        )


def init_splats_on_faces(n_faces, sh_degree=3, init_opacity=0.1):
    """One splat per face at the local origin, identity rotation, unit scale."""
    k = num_sh_coeffs(sh_degree)
    return GaussianSplats(
        mu_local=np.zeros((n_faces, 3)),
        rot_local=np.tile(QUAT_IDENTITY, (n_faces, 1)),
        log_scale=np.zeros((n_faces, 3)),
        opacity_logit=np.full(n_faces, float(opacity_inverse_activation(init_opacity))),
        sh_coeffs=np.zeros((n_faces, 3, k)),
        parent_face=np.arange(n_faces, dtype=np.int64),
        sh_degree=sh_degree,
    )
