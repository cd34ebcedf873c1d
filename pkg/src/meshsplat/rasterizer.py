"""Differentiable splatting: perspective projection of 3D Gaussians and
depth-sorted alpha compositing, with an exact analytic backward pass.

Two forward paths share every constant and clamp below so they agree to
floating-point noise: a 16x16 tile-binned path used everywhere, and a naive
all-splats-per-pixel path kept as a correctness oracle for tests. A pixel
takes a contribution from a splat only while the Mahalanobis radius is inside
the 3-sigma cutoff; tile binning is conservative for that cutoff, so binning
never changes the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

TILE = 16
LOW_PASS = 0.3          # px^2 added to the 2D covariance diagonal
ALPHA_CLAMP = 0.99
ALPHA_MIN = 1.0 / 255.0
T_EARLY_OUT = 1e-4      # stop compositing once transmittance falls below
POWER_CUTOFF = 9.0      # max Mahalanobis^2: the 3-sigma ellipse
NEAR_PLANE = 0.01       # meters
DET_MIN = 1e-12


@dataclass
class Camera:
    """Pinhole intrinsics plus a rigid world-to-camera transform (OpenCV
    axes: x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (4, 4)

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=float)
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image dimensions must be positive")
        if self.world_to_camera.shape != (4, 4):
            raise ConfigError("world_to_camera must be 4x4")
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ConfigError("world_to_camera rotation block is not orthonormal")

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "world_to_camera": self.world_to_camera.tolist()}

    @staticmethod
    def from_dict(d):
        return Camera(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                      cy=float(d["cy"]), width=int(d["width"]),
                      height=int(d["height"]),
                      world_to_camera=np.array(d["world_to_camera"], dtype=float))


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera matrix for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=0)
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    return w2c


@dataclass
class ProjectedSplats:
    """Camera-space splats surviving the near-plane/frustum cull, in the
    original splat order. source_index maps rows back to the input arrays."""

    mean2d: np.ndarray        # (M, 2) pixel coordinates
    cov2d: np.ndarray         # (M, 2, 2) after low-pass
    conic: np.ndarray         # (M, 2, 2) inverse of cov2d
    depth: np.ndarray         # (M,) camera-space z
    color: np.ndarray         # (M, 3)
    alpha_base: np.ndarray    # (M,) activated opacity
    radius: np.ndarray        # (M,) 3-sigma pixel radius
    source_index: np.ndarray  # (M,) int64 into the pre-cull arrays
    n_source: int
    n_skipped_singular: int = 0

    def __len__(self):
        return self.mean2d.shape[0]


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3) in [0, 1]
    alpha: np.ndarray          # (H, W)
    contributors: np.ndarray   # (H, W) int32 diagnostic
    n_skipped_singular: int = 0


def project_gaussians(mu_world, cov_world, colors, opacities, camera: Camera):
    """Project world-space Gaussians to 2D camera space.

    Mean via the viewing transform; covariance via the Jacobian of the
    perspective map at the mean, plus the fixed low-pass diagonal. Splats
    behind the near plane, off-screen (3-sigma bounding box), or with a
    singular projected covariance are dropped; the latter are counted.
    """
    mu_world = np.atleast_2d(np.asarray(mu_world, dtype=float))
    n = mu_world.shape[0]
    cov_world = np.asarray(cov_world, dtype=float).reshape(n, 3, 3)
    colors = np.atleast_2d(np.asarray(colors, dtype=float))
    opacities = np.atleast_1d(np.asarray(opacities, dtype=float))
    R = camera.rotation
    t = camera.translation
    t_cam = mu_world @ R.T + t
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    front = z > NEAR_PLANE
    zs = np.where(front, z, 1.0)  # avoid divide warnings for culled rows
    u = camera.fx * x / zs + camera.cx
    v = camera.fy * y / zs + camera.cy
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / zs
    J[:, 1, 1] = camera.fy / zs
    J[:, 0, 2] = -camera.fx * x / zs ** 2
    J[:, 1, 2] = -camera.fy * y / zs ** 2
    cov_cam = np.einsum("ab,nbc,dc->nad", R, cov_world, R)
    cov2d = J @ cov_cam @ np.swapaxes(J, -1, -2)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_max = mid + disc
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    on_screen = ((u + radius > 0.0) & (u - radius < camera.width) &
                 (v + radius > 0.0) & (v - radius < camera.height))
    det = a * c - b * b
    nonsingular = det > DET_MIN
    keep = front & on_screen & nonsingular
    n_singular = int(np.count_nonzero(front & on_screen & ~nonsingular))
    idx = np.nonzero(keep)[0]
    inv_det = 1.0 / det[idx]
    conic = np.empty((idx.size, 2, 2))
    conic[:, 0, 0] = c[idx] * inv_det
    conic[:, 1, 1] = a[idx] * inv_det
    conic[:, 0, 1] = conic[:, 1, 0] = -b[idx] * inv_det
    return ProjectedSplats(
        mean2d=np.stack([u[idx], v[idx]], axis=1),
        cov2d=cov2d[idx],
        conic=conic,
        depth=z[idx],
        color=colors[idx],
        alpha_base=opacities[idx],
        radius=radius[idx],
        source_index=idx.astype(np.int64),
        n_source=n,
        n_skipped_singular=n_singular,
    )


def project_gaussian(mu_world, cov_world, camera: Camera):
    """Single-splat convenience wrapper; returns None when culled."""
    proj = project_gaussians(np.asarray(mu_world, dtype=float)[None],
                             np.asarray(cov_world, dtype=float)[None],
                             np.zeros((1, 3)), np.ones(1), camera)
    if len(proj) == 0:
        return None
    return proj


def project_gaussians_backward(mu_world, cov_world, camera: Camera,
                               proj: ProjectedSplats, grad_mean2d, grad_cov2d):
    """VJP of project_gaussians back to world means and covariances.

    Includes the dependence of the perspective Jacobian on the camera-space
    mean. Culled splats receive zero gradient. Returns (N,3) and (N,3,3)
    arrays in the pre-cull indexing.
    """
    mu_world = np.atleast_2d(np.asarray(mu_world, dtype=float))
    n = mu_world.shape[0]
    cov_world = np.asarray(cov_world, dtype=float).reshape(n, 3, 3)
    R = camera.rotation
    t = camera.translation
    idx = proj.source_index
    t_cam = mu_world[idx] @ R.T + t
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    fx, fy = camera.fx, camera.fy

    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 1, 1] = fy / z
    J[:, 0, 2] = -fx * x / z ** 2
    J[:, 1, 2] = -fy * y / z ** 2
    cov_cam = np.einsum("ab,nbc,dc->nad", R, cov_world[idx], R)

    g2 = np.asarray(grad_cov2d, dtype=float)
    # covariance path: Sigma2 = J T J^T with T = R Sigma R^T
    gT = np.swapaxes(J, -1, -2) @ g2 @ J
    grad_cov_kept = np.einsum("ba,nbc,cd->nad", R, gT, R)
    gJ = (g2 + np.swapaxes(g2, -1, -2)) @ J @ cov_cam

    grad_tcam = np.zeros((idx.size, 3))
    # mean path: u = fx x / z + cx, v = fy y / z + cy
    gu = np.asarray(grad_mean2d, dtype=float)[:, 0]
    gv = np.asarray(grad_mean2d, dtype=float)[:, 1]
    grad_tcam[:, 0] += gu * fx / z
    grad_tcam[:, 1] += gv * fy / z
    grad_tcam[:, 2] += -gu * fx * x / z ** 2 - gv * fy * y / z ** 2
    # Jacobian entries' own dependence on the camera-space mean
    grad_tcam[:, 0] += gJ[:, 0, 2] * (-fx / z ** 2)
    grad_tcam[:, 1] += gJ[:, 1, 2] * (-fy / z ** 2)
    grad_tcam[:, 2] += (gJ[:, 0, 0] * (-fx / z ** 2)
                        + gJ[:, 1, 1] * (-fy / z ** 2)
                        + gJ[:, 0, 2] * (2 * fx * x / z ** 3)
                        + gJ[:, 1, 2] * (2 * fy * y / z ** 3))

    grad_mu = np.zeros((n, 3))
    grad_cov = np.zeros((n, 3, 3))
    grad_mu[idx] = grad_tcam @ R
    grad_cov[idx] = grad_cov_kept
    return grad_mu, grad_cov


def _depth_order(proj: ProjectedSplats):
    """Global front-to-back order; equal depths tie-break by source index."""
    return np.lexsort((proj.source_index, proj.depth))


def _tile_pairs(proj: ProjectedSplats, camera: Camera):
    """(tile_id, contributor) pairs sorted by tile then depth rank.

    Returns (tile_ids, members, boundaries) where members index into the
    depth-ordered contributor arrays.
    """
    order = _depth_order(proj)
    mean = proj.mean2d[order]
    radius = proj.radius[order]
    nx = (camera.width + TILE - 1) // TILE
    ny = (camera.height + TILE - 1) // TILE
    tx0 = np.clip(((mean[:, 0] - radius) // TILE).astype(int), 0, nx - 1)
    tx1 = np.clip(((mean[:, 0] + radius) // TILE).astype(int), 0, nx - 1)
    ty0 = np.clip(((mean[:, 1] - radius) // TILE).astype(int), 0, ny - 1)
    ty1 = np.clip(((mean[:, 1] + radius) // TILE).astype(int), 0, ny - 1)
    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    tiles = np.empty(int(counts.sum()), dtype=np.int64)
    members = np.empty(int(counts.sum()), dtype=np.int64)
    pos = 0
    for k in range(len(order)):
        for ty in range(ty0[k], ty1[k] + 1):
            base = ty * nx
            w = tx1[k] - tx0[k] + 1
            tiles[pos:pos + w] = base + np.arange(tx0[k], tx1[k] + 1)
            members[pos:pos + w] = k
            pos += w
    sort = np.lexsort((members, tiles))  # members already in depth order
    tiles = tiles[sort]
    members = members[sort]
    boundaries = np.searchsorted(tiles, np.arange(nx * ny + 1))
    return order, members, boundaries, nx, ny


def _pixel_grid(camera, tx, ty):
    x0, x1 = tx * TILE, min((tx + 1) * TILE, camera.width)
    y0, y1 = ty * TILE, min((ty + 1) * TILE, camera.height)
    px = np.arange(x0, x1) + 0.5
    py = np.arange(y0, y1) + 0.5
    return x0, x1, y0, y1, px, py


def _composite(px, py, mean, conic, alpha_base):
    """Shared per-pixel compositing math for a contributor block.

    Returns (alpha, alpha_eff, trans, include, weight) with pixel-major shape
    (P, K) where P = len(py) * len(px).
    """
    rows = np.repeat(py, px.size)
    cols = np.tile(px, py.size)
    dx = cols[:, None] - mean[None, :, 0]
    dy = rows[:, None] - mean[None, :, 1]
    a = conic[:, 0, 0][None, :]
    b = conic[:, 0, 1][None, :]
    c = conic[:, 1, 1][None, :]
    rho = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    g = np.exp(-0.5 * rho)
    alpha_raw = alpha_base[None, :] * g
    alpha = np.minimum(alpha_raw, ALPHA_CLAMP)
    valid = (rho <= POWER_CUTOFF) & (alpha_raw >= ALPHA_MIN)
    alpha_eff = np.where(valid, alpha, 0.0)
    trans = np.cumprod(1.0 - alpha_eff, axis=1)
    trans = np.concatenate([np.ones((trans.shape[0], 1)), trans[:, :-1]], axis=1)
    include = valid & (trans >= T_EARLY_OUT)
    weight = np.where(include, alpha * trans, 0.0)
    return dx, dy, rho, g, alpha_raw, alpha, alpha_eff, trans, include, weight


def rasterize_forward(proj: ProjectedSplats, camera: Camera):
    """Tile-binned front-to-back alpha compositing over a black background."""
    H, W = camera.height, camera.width
    out = RenderOutput(color=np.zeros((H, W, 3)), alpha=np.zeros((H, W)),
                       contributors=np.zeros((H, W), dtype=np.int32),
                       n_skipped_singular=proj.n_skipped_singular)
    if len(proj) == 0:
        return out
    order, members, boundaries, nx, ny = _tile_pairs(proj, camera)
    mean = proj.mean2d[order]
    conic = proj.conic[order]
    alpha_base = proj.alpha_base[order]
    color = proj.color[order]
    for tid in range(nx * ny):
        lo, hi = boundaries[tid], boundaries[tid + 1]
        if lo == hi:
            continue
        ks = members[lo:hi]
        ty, tx = divmod(tid, nx)
        x0, x1, y0, y1, px, py = _pixel_grid(camera, tx, ty)
        _, _, _, _, _, _, _, _, include, weight = _composite(
            px, py, mean[ks], conic[ks], alpha_base[ks])
        shape = (y1 - y0, x1 - x0)
        out.color[y0:y1, x0:x1] += (weight @ color[ks]).reshape(shape + (3,))
        out.alpha[y0:y1, x0:x1] += weight.sum(axis=1).reshape(shape)
        out.contributors[y0:y1, x0:x1] += include.sum(axis=1).reshape(shape).astype(np.int32)
    return out


def naive_rasterize(proj: ProjectedSplats, camera: Camera, block_rows=8):
    """Reference rasterizer: every pixel composites every splat, globally
    depth-sorted, with the exact clamps of the tiled path. O(pixels x splats);
    test use only."""
    H, W = camera.height, camera.width
    out = RenderOutput(color=np.zeros((H, W, 3)), alpha=np.zeros((H, W)),
                       contributors=np.zeros((H, W), dtype=np.int32),
                       n_skipped_singular=proj.n_skipped_singular)
    if len(proj) == 0:
        return out
    order = _depth_order(proj)
    mean = proj.mean2d[order]
    conic = proj.conic[order]
    alpha_base = proj.alpha_base[order]
    color = proj.color[order]
    px = np.arange(W) + 0.5
    for y0 in range(0, H, block_rows):
        y1 = min(y0 + block_rows, H)
        py = np.arange(y0, y1) + 0.5
        _, _, _, _, _, _, _, _, include, weight = _composite(
            px, py, mean, conic, alpha_base)
        shape = (y1 - y0, W)
        out.color[y0:y1] = (weight @ color).reshape(shape + (3,))
        out.alpha[y0:y1] = weight.sum(axis=1).reshape(shape)
        out.contributors[y0:y1] = include.sum(axis=1).reshape(shape).astype(np.int32)
    return out


def rasterize_backward(proj: ProjectedSplats, camera: Camera, grad_color_image):
    """Analytic VJP of rasterize_forward wrt per-splat quantities.

    Recomputes the forward per tile (no cached pixel state). Contributors
    dropped by the cutoff, the contribution floor, or the transmittance
    early-out get zero gradient, as does the saturated branch of the alpha
    clamp. Returns dict with grad_mean2d, grad_cov2d, grad_color,
    grad_alpha_base aligned with `proj` rows.
    """
    M = len(proj)
    grads = {
        "grad_mean2d": np.zeros((M, 2)),
        "grad_cov2d": np.zeros((M, 2, 2)),
        "grad_color": np.zeros((M, 3)),
        "grad_alpha_base": np.zeros(M),
    }
    if M == 0:
        return grads
    order, members, boundaries, nx, ny = _tile_pairs(proj, camera)
    mean = proj.mean2d[order]
    conic = proj.conic[order]
    alpha_base = proj.alpha_base[order]
    color = proj.color[order]
    g_mean = np.zeros((M, 2))
    g_conic = np.zeros((M, 2, 2))
    g_color = np.zeros((M, 3))
    g_alpha = np.zeros(M)
    for tid in range(nx * ny):
        lo, hi = boundaries[tid], boundaries[tid + 1]
        if lo == hi:
            continue
        ks = members[lo:hi]
        ty, tx = divmod(tid, nx)
        x0, x1, y0, y1, px, py = _pixel_grid(camera, tx, ty)
        dx, dy, rho, g, alpha_raw, alpha, alpha_eff, trans, include, weight = \
            _composite(px, py, mean[ks], conic[ks], alpha_base[ks])
        gpix = grad_color_image[y0:y1, x0:x1].reshape(-1, 3)  # (P, 3)
        col = color[ks]  # (K, 3)
        # dL/d(weight_k) = gpix . color_k
        g_w = gpix @ col.T  # (P, K)
        # suffix_k = sum_{j > k} weight_j * (gpix . color_j)
        tail = np.cumsum((weight * g_w)[:, ::-1], axis=1)[:, ::-1]
        suffix = tail - weight * g_w
        # dL/da_k = (dL.c_k) T_k - suffix_k / (1 - a_k), included only
        g_a = np.where(include, g_w * trans - suffix / (1.0 - alpha_eff), 0.0)
        live = alpha_raw < ALPHA_CLAMP  # saturated alphas freeze
        g_araw = np.where(live, g_a, 0.0)
        g_alpha_k = (g_araw * g).sum(axis=0)
        g_G = g_araw * alpha_base[ks][None, :]
        g_rho = -0.5 * g * g_G
        a = conic[ks][:, 0, 0][None, :]
        b = conic[ks][:, 0, 1][None, :]
        c = conic[ks][:, 1, 1][None, :]
        g_dx = g_rho * (2.0 * a * dx + 2.0 * b * dy)
        g_dy = g_rho * (2.0 * b * dx + 2.0 * c * dy)
        g_mean_k = -np.stack([g_dx.sum(axis=0), g_dy.sum(axis=0)], axis=1)
        g_q = np.empty((len(ks), 2, 2))
        g_q[:, 0, 0] = (g_rho * dx * dx).sum(axis=0)
        g_q[:, 1, 1] = (g_rho * dy * dy).sum(axis=0)
        g_q[:, 0, 1] = g_q[:, 1, 0] = (g_rho * dx * dy).sum(axis=0)
        g_color_k = weight.T @ gpix
        # each splat appears at most once per tile, so a direct indexed add
        # is safe and keeps the tile-order reduction deterministic
        g_mean[ks] += g_mean_k
        g_conic[ks] += g_q
        g_color[ks] += g_color_k
        g_alpha[ks] += g_alpha_k
    # conic = inv(cov2d):  dL/dcov = -Q^T dL/dQ Q^T, Q symmetric
    g_cov = -proj.conic[order] @ g_conic @ proj.conic[order]
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    grads["grad_mean2d"] = g_mean[inv]
    grads["grad_cov2d"] = g_cov[inv]
    grads["grad_color"] = g_color[inv]
    grads["grad_alpha_base"] = g_alpha[inv]
    return grads
