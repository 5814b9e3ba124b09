"""Scene composition: directional shading of the Gaussian cloud, planar
shadow casting, background blending, and the light-transport consistency
loss against a pluggable relight model.

Shading is deliberately linear in light intensity — Lambertian factors
applied to the stored albedo on a copy — so the superposition property
holds exactly at the shading stage and to rasterizer tolerance end to
end: render(shade(L1)) + render(shade(L2)) == render(shade(L1 (+) L2))
over a black background.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import project_points
from .errors import SchemaError
from .images import load_png, reinhard, srgb_encode
from .rasterizer import sigmoid


@dataclass
class Light:
    direction: np.ndarray      # unit 3-vector, direction the light travels
    intensity: float = 1.0
    ambient: float = 0.0

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(self.direction)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("light direction must be unit-norm")
        if self.intensity < 0 or self.ambient < 0:
            raise ValueError("intensity and ambient must be nonnegative")


@dataclass
class GroundPlane:
    normal: np.ndarray         # unit 3-vector
    offset: float = 0.0        # plane is {x : normal . x = offset}

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-6:
            raise ValueError("plane normal must be unit-norm")


@dataclass
class SceneAsset:
    background: np.ndarray     # (H, W, 3) linear HDR
    ground_plane: GroundPlane
    light: Light
    scene_prompt: str = ""

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.background.ndim != 3 or self.background.shape[2] != 3:
            raise ValueError("background must be HxWx3")


def lambert_factors(normals, lights):
    """Per-Gaussian scale: sum over lights of ambient + intensity * cos."""
    if isinstance(lights, Light):
        lights = [lights]
    f = np.zeros(len(normals))
    for L in lights:
        cos = np.maximum(0.0, normals @ (-L.direction))
        f += L.ambient + L.intensity * cos
    return f


def shade_directional(dcloud, light):
    """Scale colors by the Lambertian factor of the bound face normal.

    Accepts a single Light or an iterable of them (factors add). The input
    cloud's stored albedo is never touched; shading goes on a copy.
    """
    factors = lambert_factors(dcloud.normals, light)
    shaded = replace(dcloud, cloud=dcloud.cloud.copy(),
                     kept_indices=dcloud.kept_indices.copy(),
                     normals=dcloud.normals.copy())
    shaded.cloud.colors = shaded.cloud.colors * factors[:, None]
    return shaded


@dataclass
class ShadowLayer:
    attenuation: np.ndarray    # (H, W) in [0, 1]
    light_parallel: bool = False


def cast_shadow(dcloud, scene, cam, shadow_strength=0.6, softness=1.0):
    """Project Gaussian centers along the light onto the ground plane and
    splat soft disks; returns attenuation in [1 - strength, 1].

    A light running parallel to the plane casts nothing; the result is
    flagged instead of raised.
    """
    H, W = cam.height, cam.width
    atten = np.ones((H, W))
    n = scene.ground_plane.normal
    d = scene.light.direction
    ndotd = float(n @ d)
    if abs(ndotd) < 1e-9:
        return ShadowLayer(atten, light_parallel=True)
    if len(dcloud.cloud) == 0:
        return ShadowLayer(atten)

    p = dcloud.cloud.positions
    t = (scene.ground_plane.offset - p @ n) / ndotd
    ground = p + t[:, None] * d                      # (N, 3) hit points
    dist = np.abs(t)                                 # travel distance to plane

    uv, z, valid = project_points(cam, ground)
    scales = np.exp(dcloud.cloud.log_scales).mean(axis=1)
    r_world = softness * scales * (1.0 + dist)
    opac = sigmoid(dcloud.cloud.opacity_logits)

    miss = np.ones((H, W))                           # product of (1 - coverage)
    for i in np.nonzero(valid)[0]:
        r_px = max(cam.fx * r_world[i] / z[i], 0.5)
        # Only touch pixels within 4 radii of the disk center.
        x0 = max(int(uv[i, 0] - 4 * r_px), 0)
        x1 = min(int(uv[i, 0] + 4 * r_px) + 1, W)
        y0 = max(int(uv[i, 1] - 4 * r_px), 0)
        y1 = min(int(uv[i, 1] + 4 * r_px) + 1, H)
        if x0 >= x1 or y0 >= y1:
            continue
        dx = np.arange(x0, x1) + 0.5 - uv[i, 0]
        dy = np.arange(y0, y1) + 0.5 - uv[i, 1]
        g = opac[i] * np.exp(-0.5 * (dx[None, :] ** 2 + dy[:, None] ** 2)
                             / r_px ** 2)
        miss[y0:y1, x0:x1] *= 1.0 - np.clip(g, 0.0, 1.0)
    coverage = 1.0 - miss
    return ShadowLayer(1.0 - shadow_strength * coverage)


def composite(fg, shadow, scene, tonemap=True):
    """Blend the rendered avatar over the shadowed background:
    alpha * fg + (1 - alpha) * background * shadow, then (optionally)
    tonemap + sRGB-encode to display range."""
    atten = shadow.attenuation if isinstance(shadow, ShadowLayer) \
        else np.asarray(shadow, dtype=np.float64)
    bg = scene.background
    if fg.rgb.shape != bg.shape or atten.shape != fg.alpha.shape:
        raise ValueError("foreground, background, and shadow resolutions differ")
    a = fg.alpha[:, :, None]
    out = a * fg.rgb + (1.0 - a) * (bg * atten[:, :, None])
    if tonemap:
        out = srgb_encode(reinhard(out))
    return out


@dataclass
class RelightBatch:
    """Inputs to the light-transport consistency loss."""
    appearance: np.ndarray       # I_L, image lit by `light`
    degradation: np.ndarray      # I_d
    mask: np.ndarray             # binary, second-term support
    light: object                # L for the visual term
    lights: tuple                # (L1, L2)
    singles: tuple               # (I_L1, I_L2) single-light images
    combined: np.ndarray         # image lit by L1 and L2 together
    t: int = 500
    noise: np.ndarray = None     # injected noise for the visual term


def relight_consistency_loss(model, batch, lambda_v=1.0, lambda_ic=0.1,
                             abar=None):
    """Two-term consistency objective for a relighting model.

    Visual term: the model should recover the injected noise from the
    noised appearance latent, conditioned on the light and the degradation
    latent. Consistency term: the model's prediction from the two
    single-light latents should match the latent of the combined-light
    image, inside the mask. Both are sums of squares.
    """
    from .guidance import alpha_bar_schedule
    if batch.noise is None:
        raise ValueError("batch.noise is required for the visual term")
    if batch.noise.shape != np.shape(batch.appearance):
        raise ValueError("noise and appearance shapes differ")
    mask = np.asarray(batch.mask, dtype=np.float64)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")

    abar = alpha_bar_schedule() if abar is None else abar
    a = abar[int(batch.t)]
    lat = model.encode(batch.appearance)
    lat_t = np.sqrt(a) * lat + np.sqrt(1.0 - a) * batch.noise
    pred_v = model.predict(lat_t, batch.light, int(batch.t),
                           model.encode(batch.degradation))
    if np.shape(pred_v) != np.shape(batch.noise):
        raise ValueError("visual prediction shape mismatch")
    term_v = float(np.sum((batch.noise - pred_v) ** 2))

    lat_pair = (model.encode(batch.singles[0]), model.encode(batch.singles[1]))
    pred_ic = model.predict(lat_pair, batch.lights, None, None)
    target = model.encode(batch.combined)
    if np.shape(pred_ic) != np.shape(target):
        raise ValueError("consistency prediction shape mismatch")
    m = mask if mask.ndim == np.ndim(target) else mask[..., None]
    term_ic = float(np.sum((m * (target - pred_ic)) ** 2))

    return lambda_v * term_v + lambda_ic * term_ic


def load_scene_asset(image_path):
    """Read a background image plus its `<image>.json` sidecar giving the
    ground plane, default light, and scene prompt."""
    sidecar = image_path + ".json"
    if not os.path.exists(sidecar):
        raise SchemaError(f"missing sidecar {sidecar}")
    with open(sidecar) as f:
        meta = json.load(f)
    try:
        plane = GroundPlane(np.asarray(meta["ground_plane"]["normal"], dtype=float),
                            float(meta["ground_plane"]["offset"]))
        light = Light(np.asarray(meta["light"]["direction"], dtype=float),
                      float(meta["light"].get("intensity", 1.0)),
                      float(meta["light"].get("ambient", 0.0)))
        prompt = meta.get("scene_prompt", "")
    except KeyError as e:
        raise SchemaError(f"{sidecar}: missing key {e}") from e
    if image_path.endswith(".png"):
        bg = load_png(image_path)
    else:
        from .images import load_float_image
        bg = load_float_image(image_path)
    return SceneAsset(bg, plane, light, scene_prompt=prompt)


def save_scene_sidecar(image_path, plane, light, scene_prompt=""):
    meta = {"ground_plane": {"normal": list(map(float, plane.normal)),
                             "offset": float(plane.offset)},
            "light": {"direction": list(map(float, light.direction)),
                      "intensity": float(light.intensity),
                      "ambient": float(light.ambient)},
            "scene_prompt": scene_prompt}
    with open(image_path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
