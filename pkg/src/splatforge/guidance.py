"""Dual-branch score-distillation guidance for avatar optimization.

The update direction for the Gaussian parameters is

    grad = lambda_rgb  * w_t * (eps_phi(x_t) - eps_rgb)   -> through d rgb/d theta
         + lambda_depth* w_t * (eps_phi(d_t) - eps_depth) -> through d depth/d theta

where x_t / d_t are the renders noised by a DDPM forward process at
timestep t and eps_phi is a pluggable denoiser. The pixel-space residuals
are produced here; the chain to the parameters runs through
`rasterizer.rasterize_backward`.

No pretrained model ships with the package: `mock_denoiser` provides
deterministic stand-ins (perfect / constant_bias / color_target), and
`SubprocessDenoiser` adapts any external process speaking the length-
prefixed npz protocol on stdin/stdout.

Renders are treated directly as latents (no learned encoder is in scope);
depth enters the residual normalized to [0, 1] over the covered region.
"""

import colorsys
import io
import json
import struct
import subprocess
from dataclasses import dataclass, field, replace

import numpy as np

from .avatar import bound_positions, densify_and_prune, DensifyConfig
from .body import PoseParams, face_normals, pose_mesh, regress_joints
from .camera import CameraSamplerConfig, sample_camera, project_points
from .rasterizer import RasterConfig, rasterize, rasterize_backward


def alpha_bar_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    """Cumulative DDPM signal level: alpha_bar[t] = prod_{s<=t} (1 - beta_s);
    index 0 is the clean image."""
    betas = np.linspace(beta_start, beta_end, T)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


@dataclass
class GuidanceConfig:
    lambda_rgb: float = 0.5
    lambda_depth: float = 0.5
    t_range: tuple = (20, 980)
    noise_weight: str = "constant"     # or "one_minus_alpha_bar"
    iterations: int = 800
    learning_rates: dict = field(default_factory=lambda: {
        "position": 2e-4, "rotation": 1e-3, "scale": 5e-3,
        "opacity": 5e-2, "color": 1e-2})
    resolution: int = 1024
    batch: int = 1
    timesteps: int = 1000
    # Plain SGD on pixel-summed gradients needs a safety clamp: a splat whose
    # footprint inflates collects gradient mass proportional to its area,
    # which can feed back into further growth. Per-element clipping plus a
    # body-relative cap on scales (see optimize_avatar) break that loop.
    grad_clip: float = 10.0            # per element; 0 disables
    max_scale_frac: float = 0.25       # of the canonical bounding-box diagonal

    def __post_init__(self):
        if self.lambda_rgb < 0 or self.lambda_depth < 0:
            raise ValueError("branch weights must be nonnegative")
        t0, t1 = self.t_range
        if not (0 < t0 <= t1 <= self.timesteps):
            raise ValueError("need 0 < t_min <= t_max <= timesteps")
        if self.resolution < 8:
            raise ValueError("resolution must be at least 8")
        if self.noise_weight not in ("constant", "one_minus_alpha_bar"):
            raise ValueError(f"unknown noise_weight {self.noise_weight!r}")

    def weight(self, t, abar):
        if self.noise_weight == "constant":
            return 1.0
        return 1.0 - abar[t]


@dataclass
class PoseMap:
    """Conditioning image: the skeleton drawn as colored bones/joints."""
    image: np.ndarray     # (H, W, 3) in [0, 1]


def render_pose_map(model, params, cam, bone_width=2.0):
    """Draw the posed skeleton from the camera as a colored stick figure."""
    joints = regress_joints(model, pose_mesh(model, params).vertices)
    uv, _, valid = project_points(cam, joints)
    H, W = cam.height, cam.width
    img = np.zeros((H, W, 3))
    gx, gy = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    K = len(joints)
    for k in range(K):
        parent = model.kinematic_parents[k]
        color = np.array(colorsys.hsv_to_rgb(k / max(K, 1), 0.9, 1.0))
        if parent >= 0 and valid[k] and valid[parent]:
            a, b = uv[parent], uv[k]
            ab = b - a
            denom = max(float(ab @ ab), 1e-12)
            tpar = np.clip(((gx - a[0]) * ab[0] + (gy - a[1]) * ab[1]) / denom,
                           0.0, 1.0)
            dx = gx - (a[0] + tpar * ab[0])
            dy = gy - (a[1] + tpar * ab[1])
            hit = dx * dx + dy * dy <= bone_width ** 2
            img[hit] = color
        if valid[k]:
            hit = (gx - uv[k, 0]) ** 2 + (gy - uv[k, 1]) ** 2 <= (1.8 * bone_width) ** 2
            img[hit] = color
    return PoseMap(img)


class MockDenoiser:
    """Deterministic denoiser stand-ins for desk-scale verification.

    perfect:       returns the injected noise unchanged (SDS fixed point).
    constant_bias: returns noise + c on both branches.
    color_target:  reconstructs the clean render from the noised latent and
                   returns noise + strength * (render - target), pulling
                   renders toward the target color.
    """

    def __init__(self, mode, value=None, strength=0.5, abar=None):
        if mode not in ("perfect", "constant_bias", "color_target"):
            raise ValueError(f"unknown mock mode {mode!r}")
        self.mode = mode
        self.value = None if value is None else np.asarray(value, dtype=np.float64)
        self.strength = strength
        self.abar = alpha_bar_schedule() if abar is None else abar

    def predict_noise(self, rgb_latent, depth_latent, t, pose_map, prompt,
                      noise_rgb=None, noise_depth=None):
        if noise_rgb is None or noise_depth is None:
            raise ValueError("mock denoisers need the injected noise")
        if self.mode == "perfect":
            return noise_rgb, noise_depth
        if self.mode == "constant_bias":
            return noise_rgb + self.value, noise_depth + self.value
        # color_target: invert the forward noising to recover the render.
        a = self.abar[t]
        render = (rgb_latent - np.sqrt(1.0 - a) * noise_rgb) / np.sqrt(a)
        pull = self.strength * (render - self.value)
        return noise_rgb + pull, noise_depth


def mock_denoiser(mode, value=None, strength=0.5, abar=None):
    return MockDenoiser(mode, value=value, strength=strength, abar=abar)


class SubprocessDenoiser:
    """Adapter for an out-of-process denoiser.

    Each request is a length-prefixed (uint64 little-endian) npz archive
    with arrays rgb_latent, depth_latent, noise_rgb, noise_depth, t, plus a
    JSON-encoded prompt, and the pose-map image. The child replies with a
    length-prefixed npz containing eps_rgb and eps_depth.
    """

    def __init__(self, command):
        self.proc = subprocess.Popen(command, stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE)

    def predict_noise(self, rgb_latent, depth_latent, t, pose_map, prompt,
                      noise_rgb=None, noise_depth=None):
        buf = io.BytesIO()
        np.savez(buf, rgb_latent=rgb_latent, depth_latent=depth_latent,
                 t=np.int64(t),
                 pose_map=pose_map.image if pose_map is not None else np.zeros(0),
                 prompt=np.frombuffer(
                     json.dumps(getattr(prompt, "sentence", str(prompt))).encode(),
                     dtype=np.uint8),
                 noise_rgb=noise_rgb if noise_rgb is not None else np.zeros(0),
                 noise_depth=noise_depth if noise_depth is not None else np.zeros(0))
        payload = buf.getvalue()
        self.proc.stdin.write(struct.pack("<Q", len(payload)))
        self.proc.stdin.write(payload)
        self.proc.stdin.flush()
        n = struct.unpack("<Q", self.proc.stdout.read(8))[0]
        with np.load(io.BytesIO(self.proc.stdout.read(n))) as z:
            eps_rgb, eps_depth = z["eps_rgb"], z["eps_depth"]
        if eps_rgb.shape != np.shape(rgb_latent) \
                or eps_depth.shape != np.shape(depth_latent):
            raise RuntimeError("denoiser reply has mismatched shapes")
        return eps_rgb, eps_depth

    def close(self):
        if self.proc.stdin:
            self.proc.stdin.close()
        self.proc.wait(timeout=10)


def normalize_depth(depth, alpha, eps=1e-6):
    """Map covered-region depth to [0, 1]; returns (d_norm, span, mask).

    The min/max are treated as constants by the gradient chain, so the
    adjoint of this map is simply mask/span.
    """
    mask = alpha > eps
    if not mask.any():
        return np.zeros_like(depth), 1.0, mask
    z = depth[mask] / np.maximum(alpha[mask], eps)   # mean z over the cover
    zmin, zmax = float(z.min()), float(z.max())
    # Relative floor: a nearly fronto-parallel subject has a tiny true span,
    # and dividing gradients by it would amplify them without bound.
    span = max(zmax - zmin, 1e-3 * max(abs(zmax), 1.0))
    d = np.zeros_like(depth)
    d[mask] = (depth[mask] / np.maximum(alpha[mask], eps) - zmin) / span
    return d, span, mask


def sds_pixel_gradients(denoiser, rgb, depth, pose_map, prompt, t,
                        noise_rgb, noise_depth, cfg, abar=None):
    """Pixel-space score-distillation residuals for both branches.

    Returns (grad_rgb, grad_depth) to be fed into the rasterizer's backward
    pass; the parameter chain is the caller's job.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if noise_rgb.shape != rgb.shape or noise_depth.shape != depth.shape:
        raise ValueError("noise images must match render shapes")
    if rgb.shape[:2] != depth.shape[:2]:
        raise ValueError("rgb and depth resolutions differ")
    if pose_map is not None and pose_map.image.shape[:2] != rgb.shape[:2]:
        raise ValueError("pose map resolution differs from the render")
    t = int(t)
    if not (cfg.t_range[0] <= t <= cfg.t_range[1]):
        raise ValueError(f"timestep {t} outside configured range {cfg.t_range}")

    abar = alpha_bar_schedule(cfg.timesteps) if abar is None else abar
    a = abar[t]
    lat_rgb = np.sqrt(a) * rgb + np.sqrt(1.0 - a) * noise_rgb
    lat_depth = np.sqrt(a) * depth + np.sqrt(1.0 - a) * noise_depth
    eps_rgb, eps_depth = denoiser.predict_noise(
        lat_rgb, lat_depth, t, pose_map, prompt,
        noise_rgb=noise_rgb, noise_depth=noise_depth)

    w = cfg.weight(t, abar)
    grad_rgb = cfg.lambda_rgb * w * (eps_rgb - noise_rgb)
    grad_depth = cfg.lambda_depth * w * (eps_depth - noise_depth)
    return grad_rgb, grad_depth


def _rebind_positions(avatar, model):
    """Project free position updates back onto the host-face
    parameterization (in-plane barycentric + normal offset), keeping the
    face associations fixed and bindings authoritative for positions."""
    verts, faces = model.template_vertices, model.faces
    b = avatar.bindings
    tri = verts[faces[b.faces]]                       # (N, 3, 3)
    n = face_normals(verts, faces)[b.faces]
    p = avatar.cloud.positions
    rel = p - tri[:, 0]
    off = np.einsum("nj,nj->n", rel, n)
    inplane = rel - off[:, None] * n

    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    a11 = np.einsum("nj,nj->n", e1, e1)
    a12 = np.einsum("nj,nj->n", e1, e2)
    a22 = np.einsum("nj,nj->n", e2, e2)
    r1 = np.einsum("nj,nj->n", inplane, e1)
    r2 = np.einsum("nj,nj->n", inplane, e2)
    det = np.maximum(a11 * a22 - a12 * a12, 1e-30)
    v = (a22 * r1 - a12 * r2) / det
    w = (a11 * r2 - a12 * r1) / det
    bary = np.stack([1.0 - v - w, v, w], axis=1)
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)

    b.barycentric = bary
    b.normal_offsets = off
    avatar.cloud.positions = bound_positions(verts, faces, b)


def default_camera_config(model, resolution=128, fov_deg=60.0):
    """Orbit sampler around the canonical body, framed by its bounding box."""
    verts = model.template_vertices
    target = regress_joints(model, verts)[0]
    diag = float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))
    return CameraSamplerConfig(azimuth_range=(0.0, 360.0),
                               elevation_range=(-10.0, 30.0),
                               radius_range=(1.6 * diag, 2.4 * diag),
                               target=target, fov_deg=fov_deg,
                               width=resolution, height=resolution)


def optimize_avatar(avatar, model, denoiser, prompt, cfg, seed,
                    camera_cfg=None, densify_cfg=None, raster_cfg=None,
                    callback=None):
    """Optimize the canonical Gaussian parameters by score distillation.

    Plain gradient descent with per-group step sizes; position steps are
    projected back onto the host-face parameterization so bindings stay
    authoritative. Densify/prune runs on its scheduled window. A group is
    frozen by setting its learning rate to 0. Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    av = replace(avatar, cloud=avatar.cloud.copy(),
                 bindings=avatar.bindings.subset(slice(None)))
    camera_cfg = camera_cfg or default_camera_config(model, cfg.resolution)
    densify_cfg = densify_cfg or DensifyConfig(seed=seed)
    rcfg = raster_cfg or RasterConfig()
    abar = alpha_bar_schedule(cfg.timesteps)
    lr = cfg.learning_rates

    grad_accum = np.zeros(len(av))
    grad_count = 0
    identity = PoseParams.identity(model.n_joints, model.n_shape_coeffs)
    verts = model.template_vertices
    diag = float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))
    ls_hi = np.log(cfg.max_scale_frac * diag)
    ls_lo = ls_hi - np.log(1e4)

    for it in range(1, cfg.iterations + 1):
        step = None
        render = None
        for _ in range(max(cfg.batch, 1)):
            cam = sample_camera(rng, camera_cfg)
            out = rasterize(av.cloud, cam, rcfg)
            pose = render_pose_map(model, identity, cam)
            t = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
            noise_rgb = rng.standard_normal(out.rgb.shape)
            noise_depth = rng.standard_normal(out.depth.shape)
            d_norm, span, mask = normalize_depth(out.depth, out.alpha)
            g_rgb, g_dn = sds_pixel_gradients(
                denoiser, out.rgb, d_norm, pose, prompt, t,
                noise_rgb, noise_depth, cfg, abar=abar)
            g_depth = np.where(mask, g_dn, 0.0) / span
            g = rasterize_backward(av.cloud, cam, g_rgb, g_depth, None, rcfg)
            if step is None:
                step = g
            else:
                step.position += g.position
                step.rotation += g.rotation
                step.log_scale += g.log_scale
                step.opacity_logit += g.opacity_logit
                step.color += g.color
                step.mean2d += g.mean2d
            render = out

        nb = max(cfg.batch, 1)
        for arr in (step.position, step.rotation, step.log_scale,
                    step.opacity_logit, step.color):
            if not np.all(np.isfinite(arr)):
                raise RuntimeError(f"non-finite gradient at iteration {it}")
            if cfg.grad_clip:
                np.clip(arr, -cfg.grad_clip, cfg.grad_clip, out=arr)

        # Zero steps must be exact no-ops (the perfect-denoiser fixed point),
        # so rebinding/renormalization only run when something moved.
        pos_step = lr["position"] / nb * step.position
        if np.any(pos_step):
            av.cloud.positions -= pos_step
            _rebind_positions(av, model)
        rot_step = lr["rotation"] / nb * step.rotation
        if np.any(rot_step):
            av.cloud.rotations -= rot_step
            av.cloud.rotations /= np.linalg.norm(av.cloud.rotations, axis=1,
                                                 keepdims=True)
        ls_step = lr["scale"] / nb * step.log_scale
        if np.any(ls_step):
            av.cloud.log_scales -= ls_step
            np.clip(av.cloud.log_scales, ls_lo, ls_hi,
                    out=av.cloud.log_scales)
        av.cloud.opacity_logits -= lr["opacity"] / nb * step.opacity_logit
        av.cloud.colors -= lr["color"] / nb * step.color

        grad_accum += np.linalg.norm(step.mean2d / nb, axis=1)
        grad_count += 1
        if (densify_cfg.start_iter <= it <= densify_cfg.stop_iter
                and it % densify_cfg.interval == 0):
            av = densify_and_prune(av, model, grad_accum / max(grad_count, 1),
                                   it, densify_cfg)
            grad_accum = np.zeros(len(av))
            grad_count = 0

        if callback is not None:
            callback(it, render, av)
    return av
