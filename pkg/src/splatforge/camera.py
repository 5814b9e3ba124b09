"""Pinhole camera, look-at orbit sampling, perspective projection.

Convention (used everywhere): right-handed world, up = +Y. Camera space has
+Z forward, +X right, +Y down (so pixel v grows downward). Azimuth is
measured about world-up starting at world +Z, increasing toward +X;
elevation is the angle above the horizontal plane. Azimuth 0, elevation 0,
radius r puts the camera at target + (0, 0, r), looking back at the target.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BehindCameraError

WORLD_UP = np.array([0.0, 1.0, 0.0])


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3) world -> camera
    translation: np.ndarray  # (3,)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if min(self.fx, self.fy) <= 0 or min(self.width, self.height) <= 0:
            raise ValueError("intrinsics must be positive")
        RtR = self.rotation.T @ self.rotation
        if not np.allclose(RtR, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be orthonormal")

    @property
    def position(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "rotation": np.asarray(d["rotation"]),
                      "translation": np.asarray(d["translation"])})


def intrinsics_from_fov(fov_deg=60.0, width=1024, height=1024):
    """Square-pixel intrinsics from a horizontal field of view."""
    fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return {"fx": fx, "fy": fx, "cx": width / 2.0, "cy": height / 2.0,
            "width": width, "height": height}


@dataclass
class CameraSamplerConfig:
    azimuth_range: tuple = (0.0, 360.0)    # degrees
    elevation_range: tuple = (-10.0, 30.0)  # degrees
    radius_range: tuple = (2.0, 3.5)       # meters
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fov_deg: float = 60.0
    width: int = 1024
    height: int = 1024
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.radius_range[0] <= 0:
            raise ValueError("radius must be positive")


def look_at(position, target, up=WORLD_UP):
    """World->camera rotation and translation for a camera at `position`
    looking at `target`, rolled so image-up follows world-up."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with target")
    forward = forward / norm

    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-8:
        # Looking straight along world-up; pick a fixed fallback roll.
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)

    R = np.stack([right, down, forward])  # rows: camera axes in world coords
    t = -R @ position
    return R, t


def sample_camera(rng, cfg):
    """Draw azimuth/elevation/radius uniformly and build a look-at camera.

    `rng` is an int seed or a numpy Generator.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    az = math.radians(rng.uniform(*cfg.azimuth_range))
    el = math.radians(rng.uniform(*cfg.elevation_range))
    r = rng.uniform(*cfg.radius_range)

    offset = r * np.array([
        math.cos(el) * math.sin(az),
        math.sin(el),
        math.cos(el) * math.cos(az),
    ])
    position = cfg.target + offset
    R, t = look_at(position, cfg.target)
    intr = intrinsics_from_fov(cfg.fov_deg, cfg.width, cfg.height)
    return Camera(rotation=R, translation=t, near=cfg.near, far=cfg.far, **intr)


def project(cam, p):
    """Project one world point; raises BehindCameraError at/behind the near plane."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    q = cam.rotation @ p + cam.translation
    if q[2] <= cam.near:
        raise BehindCameraError(f"point at camera-space z={q[2]:.4g}")
    u = cam.fx * q[0] / q[2] + cam.cx
    v = cam.fy * q[1] / q[2] + cam.cy
    return u, v, q[2]


def project_points(cam, pts):
    """Vectorized projection: (N, 3) -> (uv (N, 2), z (N,), valid (N,)).

    `valid` is False behind the near plane; uv is NaN there. Callers mark
    such keypoints invisible.
    """
    pts = np.asarray(pts, dtype=np.float64)
    q = pts @ cam.rotation.T + cam.translation
    z = q[:, 2]
    valid = z > cam.near
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([
            cam.fx * q[:, 0] / z + cam.cx,
            cam.fy * q[:, 1] / z + cam.cy,
        ], axis=1)
    uv[~valid] = np.nan
    return uv, z, valid
