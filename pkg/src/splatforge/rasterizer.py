"""Differentiable Gaussian splat rasterizer: tiled forward, analytic backward.

Forward pass (EWA splatting): each 3D Gaussian (position p, unit quaternion
r, per-axis log scale, opacity logit, RGB color) is transformed to camera
space, its covariance R S S^T R^T is pushed through the perspective Jacobian
to a 2x2 screen covariance

    cov2d = J W cov3d W^T J^T + dilation * I

and pixels are composited front to back,

    C = sum_i T_i * a_i * c_i,   T_i = prod_{j<i} (1 - a_j),
    a_i = sigmoid(opacity_logit_i) * exp(-0.5 * d^T conic d),

with alpha and alpha-weighted depth (camera z) accumulated the same way.
Gaussians are binned into screen tiles; per-pixel work is vectorized over
each tile. A naive reference renderer (`rasterize_reference`) evaluates
every Gaussian at every pixel with no tiling, truncation, or early exit and
is kept in-tree as the equivalence oracle for the tiled path.

Backward pass: exact adjoint of the forward compositing, chaining through
the conic, the projection Jacobian, the quaternion-to-matrix map, and the
exp/sigmoid parameterisations. Per-tile partial gradients are reduced in
fixed tile order so results do not depend on the worker count.

Pixel (ix, iy) is sampled at (ix + 0.5, iy + 0.5).
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .parallel import resolve_threads, run_tasks


@dataclass
class RasterConfig:
    tile_size: int = 16
    sigma_cutoff: float = 3.0     # truncate footprints at this many sigma; None disables
    early_exit: float = 1e-4      # stop a pixel once transmittance drops below; 0 disables
    alpha_min: float = 1.0 / 255.0  # contributions below this are dropped
    alpha_max: float = 1.0          # optional stability clamp (1.0 = no clamp)
    dilation: float = 0.3           # px^2 added to the screen covariance diagonal
    eig_floor: float = 1e-8         # minimum screen-covariance eigenvalue
    background: tuple = (0.0, 0.0, 0.0)
    threads: int = None             # None -> SPLATFORGE_THREADS env var, else 1


@dataclass
class RenderOutput:
    rgb: np.ndarray            # (H, W, 3) linear HDR
    alpha: np.ndarray          # (H, W) in [0, 1]
    depth: np.ndarray          # (H, W) alpha-weighted camera-space z
    screen_stats: np.ndarray   # (N,) slot for accumulated 2D positional gradient
                               # magnitudes; zero after the forward pass, filled in
                               # by training loops from backward results


@dataclass
class GaussianGrads:
    """Per-Gaussian parameter gradients from `rasterize_backward`."""
    position: np.ndarray       # (N, 3)
    rotation: np.ndarray       # (N, 4) w.r.t. the raw (pre-normalization) quaternion
    log_scale: np.ndarray      # (N, 3)
    opacity_logit: np.ndarray  # (N,)
    color: np.ndarray          # (N, 3)
    mean2d: np.ndarray         # (N, 2) screen-space positional gradient (densify signal)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _quat_to_matrix_batch(q):
    """(N, 4) unit-normalized quaternions (w, x, y, z) -> (N, 3, 3)."""
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


class _Projected:
    """Per-Gaussian screen-space quantities shared by forward and backward."""

    __slots__ = ("n", "valid", "mean2d", "cov2d", "conic", "z", "opacity",
                 "radius", "order", "q_cam", "J", "R", "scales", "quat_n",
                 "quat_norm", "colors")


def _project_gaussians(cloud, cam, cfg):
    """Project every Gaussian to screen space; cull those behind the camera."""
    P = np.asarray(cloud.positions, dtype=np.float64)
    quats = np.asarray(cloud.rotations, dtype=np.float64)
    log_scales = np.asarray(cloud.log_scales, dtype=np.float64)
    logits = np.asarray(cloud.opacity_logits, dtype=np.float64)
    colors = np.asarray(cloud.colors, dtype=np.float64)
    n = len(P)

    pr = _Projected()
    pr.n = n
    W = cam.rotation
    q_cam = P @ W.T + cam.translation          # (N, 3) camera-space centers
    z = q_cam[:, 2]
    valid = z > cam.near

    scales = np.exp(log_scales)                # (N, 3)
    quat_norm = np.linalg.norm(quats, axis=1)
    R = _quat_to_matrix_batch(quats)           # (N, 3, 3)
    # cov3d = R diag(s^2) R^T
    RS = R * scales[:, None, :]                # R @ diag(s)
    cov3d = RS @ RS.swapaxes(1, 2)

    # Perspective Jacobian of (u, v) w.r.t. camera coordinates, at the center.
    zs = np.where(valid, z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 1, 1] = cam.fy / zs
    J[:, 0, 2] = -cam.fx * q_cam[:, 0] / zs ** 2
    J[:, 1, 2] = -cam.fy * q_cam[:, 1] / zs ** 2

    M = J @ W                                   # (N, 2, 3)
    cov2d = M @ cov3d @ M.swapaxes(1, 2)
    cov2d[:, 0, 0] += cfg.dilation
    cov2d[:, 1, 1] += cfg.dilation

    # Clamp eigenvalues from below so inversion never blows up.
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_min = mid - disc
    bump = np.maximum(cfg.eig_floor - lam_min, 0.0)
    cov2d[:, 0, 0] += bump
    cov2d[:, 1, 1] += bump
    lam_max = mid + disc + bump

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det

    mean2d = np.stack([
        cam.fx * q_cam[:, 0] / zs + cam.cx,
        cam.fy * q_cam[:, 1] / zs + cam.cy,
    ], axis=1)

    opacity = sigmoid(logits)
    # Footprint radius: everything beyond it contributes alpha below the
    # drop threshold (or lies past the sigma cutoff), so tile binning by
    # this radius loses nothing relative to the naive reference.
    with np.errstate(divide="ignore"):
        sig2_amin = 2.0 * np.log(np.maximum(opacity, 1e-300) / cfg.alpha_min) \
            if cfg.alpha_min > 0 else np.full(n, np.inf)
    sig2_cut = cfg.sigma_cutoff ** 2 if cfg.sigma_cutoff is not None else np.inf
    sig2_eff = np.minimum(sig2_amin, sig2_cut)
    visible = valid & (sig2_eff > 0)
    sig2_eff = np.clip(sig2_eff, 0.0, 1e8)
    radius = np.sqrt(sig2_eff * lam_max)

    pr.valid = visible
    pr.mean2d = mean2d
    pr.cov2d = cov2d
    pr.conic = conic
    pr.z = z
    pr.opacity = opacity
    pr.radius = radius
    pr.order = np.argsort(np.where(visible, z, np.inf), kind="stable")
    pr.q_cam = q_cam
    pr.J = J
    pr.R = R
    pr.scales = scales
    pr.quat_n = quats / np.maximum(quat_norm, 1e-300)[:, None]
    pr.quat_norm = quat_norm
    pr.colors = colors
    return pr


def _tile_bins(pr, width, height, tile_size):
    """Assign depth-sorted Gaussians to overlapping tiles.

    Returns (ntx, nty, tile_slices, sorted_ids) where tile_slices[t] slices
    sorted_ids to the Gaussian indices touching tile t, front to back.
    """
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size

    ids = np.nonzero(pr.valid)[0]
    if len(ids) == 0:
        return ntx, nty, [slice(0, 0)] * (ntx * nty), np.zeros(0, dtype=np.int64)

    mean2d = pr.mean2d[ids]
    radius = pr.radius[ids]
    tx0 = np.clip(((mean2d[:, 0] - radius) // tile_size).astype(np.int64), 0, ntx - 1)
    tx1 = np.clip(((mean2d[:, 0] + radius) // tile_size).astype(np.int64), 0, ntx - 1)
    ty0 = np.clip(((mean2d[:, 1] - radius) // tile_size).astype(np.int64), 0, nty - 1)
    ty1 = np.clip(((mean2d[:, 1] + radius) // tile_size).astype(np.int64), 0, nty - 1)

    # Drop Gaussians fully off-screen.
    on = ((mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius < ntx * tile_size) &
          (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius < nty * tile_size))
    ids, tx0, tx1, ty0, ty1 = ids[on], tx0[on], tx1[on], ty0[on], ty1[on]
    if len(ids) == 0:
        return ntx, nty, [slice(0, 0)] * (ntx * nty), np.zeros(0, dtype=np.int64)

    spanx = tx1 - tx0 + 1
    spany = ty1 - ty0 + 1
    counts = spanx * spany
    total = int(counts.sum())
    rep = np.repeat(np.arange(len(ids)), counts)
    # Offset of each (gaussian, tile) pair within its gaussian's span.
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    off = np.arange(total) - np.repeat(starts, counts)
    tx = tx0[rep] + off % spanx[rep]
    ty = ty0[rep] + off // spanx[rep]
    tile_id = ty * ntx + tx

    # Depth rank makes per-tile lists front-to-back after the lexsort.
    rank = np.empty(pr.n, dtype=np.int64)
    rank[pr.order] = np.arange(pr.n)
    pair_order = np.lexsort((rank[ids[rep]], tile_id))
    sorted_tiles = tile_id[pair_order]
    sorted_ids = ids[rep][pair_order]

    bounds = np.searchsorted(sorted_tiles, np.arange(ntx * nty + 1))
    tile_slices = [slice(bounds[t], bounds[t + 1]) for t in range(ntx * nty)]
    return ntx, nty, tile_slices, sorted_ids


def _pixel_grid(x0, y0, w, h):
    xs = x0 + 0.5 + np.arange(w)
    ys = y0 + 0.5 + np.arange(h)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)   # (P, 2)


def _alpha_block(pr, gids, pix, cfg):
    """Effective alphas for Gaussians `gids` over pixels `pix`.

    Returns (alpha (G, P), exp term g (G, P), offsets d (G, P, 2), masks).
    Dropped contributions are exact zeros so cumulative products match a
    sequential skip.
    """
    d = pix[None, :, :] - pr.mean2d[gids][:, None, :]          # (G, P, 2)
    Q = pr.conic[gids]                                          # (G, 2, 2)
    sig2 = (Q[:, None, 0, 0] * d[..., 0] ** 2
            + 2.0 * Q[:, None, 0, 1] * d[..., 0] * d[..., 1]
            + Q[:, None, 1, 1] * d[..., 1] ** 2)
    inside = np.ones_like(sig2, dtype=bool) if cfg.sigma_cutoff is None \
        else sig2 <= cfg.sigma_cutoff ** 2
    g = np.exp(-0.5 * sig2)
    alpha = pr.opacity[gids][:, None] * g
    clamped = alpha > cfg.alpha_max
    alpha = np.minimum(alpha, cfg.alpha_max)
    keep = inside & (alpha >= cfg.alpha_min) if cfg.alpha_min > 0 else inside
    alpha = np.where(keep, alpha, 0.0)
    return alpha, g, d, keep, clamped


def _composite_block(alpha, cfg):
    """Transmittance before each Gaussian and its blend weight, per pixel.

    Early exit freezes a pixel's transmittance once it crosses the
    threshold (exactly the sequential skip), so the backward pass remains
    the exact adjoint of what was actually rendered.
    """
    one_minus = 1.0 - alpha
    T_run = np.cumprod(one_minus, axis=0)
    T_before = np.empty_like(T_run)
    T_before[0] = 1.0
    T_before[1:] = T_run[:-1]
    if cfg.early_exit > 0:
        # Whether a pixel has crossed the threshold before Gaussian i is the
        # same under frozen and unfrozen products (both sit below it after
        # the first crossing), so the mask can be taken from the plain
        # cumulative product.
        active = T_before >= cfg.early_exit
        T_run = np.cumprod(np.where(active, one_minus, 1.0), axis=0)
        T_before[1:] = T_run[:-1]
        w = np.where(active, alpha * T_before, 0.0)
    else:
        active = None
        w = alpha * T_before
    return T_before, T_run[-1].copy(), w, active


def rasterize(cloud, cam, cfg=None):
    """Render a Gaussian cloud through a pinhole camera (tiled, deterministic).

    `cloud` provides positions (N,3), rotations (N,4), log_scales (N,3),
    opacity_logits (N,), colors (N,3).
    """
    cfg = cfg or RasterConfig()
    H, W = cam.height, cam.width
    n = len(cloud.positions)
    out = RenderOutput(rgb=np.zeros((H, W, 3)), alpha=np.zeros((H, W)),
                       depth=np.zeros((H, W)), screen_stats=np.zeros(n))
    bg = np.asarray(cfg.background, dtype=np.float64)
    if n == 0:
        out.rgb += bg
        return out

    pr = _project_gaussians(cloud, cam, cfg)
    ntx, nty, tile_slices, sorted_ids = _tile_bins(pr, W, H, cfg.tile_size)
    ts = cfg.tile_size

    def render_tile(t):
        gids = sorted_ids[tile_slices[t]]
        ty, tx = divmod(t, ntx)
        x0, y0 = tx * ts, ty * ts
        w_, h_ = min(ts, W - x0), min(ts, H - y0)
        if len(gids) == 0:
            return t, None
        pix = _pixel_grid(x0, y0, w_, h_)
        alpha, _, _, _, _ = _alpha_block(pr, gids, pix, cfg)
        _, T_final, w, _ = _composite_block(alpha, cfg)
        rgb = np.einsum("gp,gc->pc", w, pr.colors[gids])
        dep = w.T @ pr.z[gids]
        acc = w.sum(axis=0)
        return t, (rgb.reshape(h_, w_, 3), dep.reshape(h_, w_),
                   acc.reshape(h_, w_), T_final.reshape(h_, w_))

    n_threads = resolve_threads(cfg.threads)
    results = run_tasks(render_tile, range(ntx * nty), n_threads)
    T_img = np.ones((H, W))
    for t, res in results:
        if res is None:
            continue
        ty, tx = divmod(t, ntx)
        x0, y0 = tx * ts, ty * ts
        rgb, dep, acc, T_final = res
        h_, w_ = rgb.shape[:2]
        out.rgb[y0:y0 + h_, x0:x0 + w_] = rgb
        out.depth[y0:y0 + h_, x0:x0 + w_] = dep
        out.alpha[y0:y0 + h_, x0:x0 + w_] = acc
        T_img[y0:y0 + h_, x0:x0 + w_] = T_final
    out.rgb += T_img[:, :, None] * bg
    return out


def rasterize_reference(cloud, cam, cfg=None):
    """Naive all-pixels-all-Gaussians renderer: no tiling, no truncation,
    no early exit. Slow by design; the oracle the tiled path is tested against."""
    cfg = replace(cfg or RasterConfig(), sigma_cutoff=None, early_exit=0.0)
    H, W = cam.height, cam.width
    n = len(cloud.positions)
    rgb = np.zeros((H, W, 3))
    dep = np.zeros((H, W))
    acc = np.zeros((H, W))
    T = np.ones((H, W))
    bg = np.asarray(cfg.background, dtype=np.float64)
    if n == 0:
        return RenderOutput(rgb + bg, acc, dep, np.zeros(n))

    pr = _project_gaussians(cloud, cam, cfg)
    pix = _pixel_grid(0, 0, W, H)                      # (H*W, 2)
    for i in pr.order:
        if not pr.valid[i]:
            continue
        d = pix - pr.mean2d[i]
        Q = pr.conic[i]
        sig2 = (Q[0, 0] * d[:, 0] ** 2 + 2 * Q[0, 1] * d[:, 0] * d[:, 1]
                + Q[1, 1] * d[:, 1] ** 2)
        alpha = pr.opacity[i] * np.exp(-0.5 * sig2)
        alpha = np.minimum(alpha, cfg.alpha_max)
        if cfg.alpha_min > 0:
            alpha = np.where(alpha >= cfg.alpha_min, alpha, 0.0)
        alpha = alpha.reshape(H, W)
        w = T * alpha
        rgb += w[:, :, None] * pr.colors[i]
        dep += w * pr.z[i]
        acc += w
        T = T * (1.0 - alpha)
    rgb += T[:, :, None] * bg
    return RenderOutput(rgb, acc, dep, np.zeros(n))


def rasterize_backward(cloud, cam, grad_rgb=None, grad_depth=None,
                       grad_alpha=None, cfg=None):
    """Adjoint of `rasterize`: pull output-image gradients back to the
    Gaussian parameters. Gradient images may be None (treated as zero)."""
    cfg = cfg or RasterConfig()
    H, W = cam.height, cam.width
    n = len(cloud.positions)

    def as_img(g, shape, name):
        if g is None:
            return np.zeros(shape)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != shape:
            raise ValueError(f"{name} must have shape {shape}, got {g.shape}")
        return g

    gC = as_img(grad_rgb, (H, W, 3), "grad_rgb")
    gD = as_img(grad_depth, (H, W), "grad_depth")
    gA = as_img(grad_alpha, (H, W), "grad_alpha")

    grads = GaussianGrads(position=np.zeros((n, 3)), rotation=np.zeros((n, 4)),
                          log_scale=np.zeros((n, 3)), opacity_logit=np.zeros(n),
                          color=np.zeros((n, 3)), mean2d=np.zeros((n, 2)))
    if n == 0:
        return grads

    pr = _project_gaussians(cloud, cam, cfg)
    ntx, nty, tile_slices, sorted_ids = _tile_bins(pr, W, H, cfg.tile_size)
    ts = cfg.tile_size
    bg = np.asarray(cfg.background, dtype=np.float64)

    # Per-Gaussian intermediate gradients accumulated over tiles.
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    g_color = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_z = np.zeros(n)

    def tile_grads(t):
        gids = sorted_ids[tile_slices[t]]
        if len(gids) == 0:
            return None
        ty, tx = divmod(t, ntx)
        x0, y0 = tx * ts, ty * ts
        w_, h_ = min(ts, W - x0), min(ts, H - y0)
        gC_t = gC[y0:y0 + h_, x0:x0 + w_].reshape(-1, 3)    # (P, 3)
        gD_t = gD[y0:y0 + h_, x0:x0 + w_].ravel()
        gA_t = gA[y0:y0 + h_, x0:x0 + w_].ravel()
        if not (gC_t.any() or gD_t.any() or gA_t.any()):
            return None
        pix = _pixel_grid(x0, y0, w_, h_)
        alpha, gexp, d, keep, clamped = _alpha_block(pr, gids, pix, cfg)
        T_before, T_final, w, active = _composite_block(alpha, cfg)
        if active is not None:
            # Contributions frozen by early exit are not part of the forward
            # function, so they carry no gradient.
            keep = keep & active

        cols = pr.colors[gids]                              # (G, 3)
        zs = pr.z[gids]                                     # (G,)

        # Suffix sums of blended color/depth/alpha strictly after each i.
        wc = w[:, :, None] * cols[:, None, :]               # (G, P, 3)
        wz = w * zs[:, None]
        cum_c = np.cumsum(wc, axis=0)
        cum_z = np.cumsum(wz, axis=0)
        cum_a = np.cumsum(w, axis=0)
        S_c = cum_c[-1][None] - cum_c                       # (G, P, 3)
        S_z = cum_z[-1][None] - cum_z
        S_a = cum_a[-1][None] - cum_a

        # dL/dw_i and the occlusion term through later transmittances.
        dL_dw = np.einsum("pc,gc->gp", gC_t, cols) + gD_t[None] * zs[:, None] \
            + gA_t[None]
        bg_dot = gC_t @ bg                                   # (P,)
        suffix = (np.einsum("gpc,pc->gp", S_c, gC_t)
                  + (T_final[None] * bg_dot[None])
                  + S_z * gD_t[None] + S_a * gA_t[None])
        denom = np.maximum(1.0 - alpha, 1e-12)
        dL_dalpha = np.where(keep, T_before * dL_dw - suffix / denom, 0.0)

        part_color = np.einsum("gp,pc->gc", w, gC_t)
        part_z = w @ gD_t
        live = keep & ~clamped
        dL_dop = np.where(live, dL_dalpha * gexp, 0.0).sum(axis=1)
        dL_dg = np.where(live, dL_dalpha * pr.opacity[gids][:, None], 0.0)
        dL_dsig2 = -0.5 * gexp * dL_dg                       # (G, P)

        Q = pr.conic[gids]
        # d(sig2)/d(mean2d) = -2 Q d ; d(sig2)/dQ = d d^T
        wd = np.einsum("gp,gpi->gi", dL_dsig2, d)            # (G, 2)
        part_mean2d = -2.0 * np.einsum("gij,gj->gi", Q, wd)
        part_conic = np.einsum("gp,gpi,gpj->gij", dL_dsig2, d, d)
        return gids, part_mean2d, part_conic, part_color, dL_dop, part_z

    n_threads = resolve_threads(cfg.threads)
    results = run_tasks(tile_grads, range(ntx * nty), n_threads)
    for res in results:                       # fixed tile order: deterministic
        if res is None:
            continue
        gids, pm, pq, pc, po, pz = res
        np.add.at(g_mean2d, gids, pm)
        np.add.at(g_conic, gids, pq)
        np.add.at(g_color, gids, pc)
        np.add.at(g_opacity, gids, po)
        np.add.at(g_z, gids, pz)

    grads.color = g_color
    grads.mean2d = g_mean2d
    op = pr.opacity
    grads.opacity_logit = g_opacity * op * (1.0 - op)

    # conic = cov2d^{-1}:  dL/dcov2d = -Q G Q  with G symmetrized.
    Gq = 0.5 * (g_conic + g_conic.swapaxes(1, 2))
    Q = pr.conic
    g_cov2d = -Q @ Gq @ Q

    # cov2d = M cov3d M^T + dilation I, M = J W.
    Wm = cam.rotation
    M = pr.J @ Wm
    RS = pr.R * pr.scales[:, None, :]
    cov3d = RS @ RS.swapaxes(1, 2)
    g_cov3d = M.swapaxes(1, 2) @ g_cov2d @ M
    g_M = 2.0 * (g_cov2d @ M @ cov3d)
    g_J = g_M @ Wm.T

    # Jacobian entries depend on the camera-space center.
    fx, fy = cam.fx, cam.fy
    qx, qy, qz = pr.q_cam[:, 0], pr.q_cam[:, 1], pr.q_cam[:, 2]
    qz = np.where(pr.valid, qz, 1.0)
    g_q = np.zeros((n, 3))
    g_q[:, 0] = g_J[:, 0, 2] * (-fx / qz ** 2)
    g_q[:, 1] = g_J[:, 1, 2] * (-fy / qz ** 2)
    g_q[:, 2] = (g_J[:, 0, 0] * (-fx / qz ** 2) + g_J[:, 1, 1] * (-fy / qz ** 2)
                 + g_J[:, 0, 2] * (2 * fx * qx / qz ** 3)
                 + g_J[:, 1, 2] * (2 * fy * qy / qz ** 3))
    # mean2d = (fx qx/qz + cx, fy qy/qz + cy)
    g_q[:, 0] += g_mean2d[:, 0] * fx / qz
    g_q[:, 1] += g_mean2d[:, 1] * fy / qz
    g_q[:, 2] += (-g_mean2d[:, 0] * fx * qx / qz ** 2
                  - g_mean2d[:, 1] * fy * qy / qz ** 2)
    g_q[:, 2] += g_z
    g_q[~pr.valid] = 0.0
    grads.position = g_q @ Wm

    # cov3d = N N^T with N = R diag(s):  dL/dN = 2 sym(g_cov3d) N.
    V3 = 0.5 * (g_cov3d + g_cov3d.swapaxes(1, 2))
    g_N = 2.0 * (V3 @ RS)
    g_s = np.einsum("nik,nik->nk", pr.R, g_N)
    grads.log_scale = g_s * pr.scales
    g_R = g_N * pr.scales[:, None, :]

    # Rotation-matrix entries w.r.t. the normalized quaternion.
    w4, x4, y4, z4 = (pr.quat_n[:, 0], pr.quat_n[:, 1],
                      pr.quat_n[:, 2], pr.quat_n[:, 3])
    zero = np.zeros(n)
    dR = np.empty((4, n, 3, 3))
    dR[0] = np.stack([zero, -2 * z4, 2 * y4, 2 * z4, zero, -2 * x4,
                      -2 * y4, 2 * x4, zero], axis=1).reshape(n, 3, 3)
    dR[1] = np.stack([zero, 2 * y4, 2 * z4, 2 * y4, -4 * x4, -2 * w4,
                      2 * z4, 2 * w4, -4 * x4], axis=1).reshape(n, 3, 3)
    dR[2] = np.stack([-4 * y4, 2 * x4, 2 * w4, 2 * x4, zero, 2 * z4,
                      -2 * w4, 2 * z4, -4 * y4], axis=1).reshape(n, 3, 3)
    dR[3] = np.stack([-4 * z4, -2 * w4, 2 * x4, 2 * w4, -4 * z4, 2 * y4,
                      2 * x4, 2 * y4, zero], axis=1).reshape(n, 3, 3)
    g_qn = np.einsum("cnij,nij->nc", dR, g_R)                # (N, 4)
    # Through the normalization q_hat = q / |q|.
    dot = np.einsum("nc,nc->n", g_qn, pr.quat_n)
    grads.rotation = (g_qn - dot[:, None] * pr.quat_n) / pr.quat_norm[:, None]

    grads.position[~pr.valid] = 0.0
    grads.rotation[~pr.valid] = 0.0
    grads.log_scale[~pr.valid] = 0.0
    return grads


def mask_and_bbox(alpha, threshold=0.5):
    """Binary mask and tight bbox (x, y, w, h) from an alpha image.

    Returns (mask, None) when nothing clears the threshold.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    alpha = np.asarray(alpha)
    mask = alpha >= threshold
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return mask, None
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return mask, (x0, y0, x1 - x0 + 1, y1 - y0 + 1)
