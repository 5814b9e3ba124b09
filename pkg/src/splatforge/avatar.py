"""Canonical Gaussian avatar: surface-bound cloud construction and
adaptive densify/prune.

Every Gaussian is bound to a mesh face through (face index, barycentric
coordinates, offset along the face normal). The canonical space is the
body model's template mesh at identity pose with zero shape coefficients;
positions are always reconstructible from bindings, and densify/prune
regenerates child positions *from* freshly sampled bindings so the two
never drift apart.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .body import face_areas, face_normals
from .errors import SchemaError
from .rasterizer import sigmoid
from .rotations import quat_to_matrix

AVATAR_FORMAT_VERSION = 1

# sigmoid(40) == 1.0 exactly in double precision; opacities start at 1.
_OPAQUE_LOGIT = 40.0
_INIT_GRAY = 0.5


@dataclass
class GaussianCloud:
    """Struct-of-arrays Gaussian parameters (the optimizable state)."""
    positions: np.ndarray       # (N, 3) meters
    rotations: np.ndarray       # (N, 4) unit quaternions (w, x, y, z)
    log_scales: np.ndarray      # (N, 3) log meters per principal axis
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3) degree-0 SH coefficients, linear RGB

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        self.opacity_logits = np.atleast_1d(
            np.asarray(self.opacity_logits, dtype=np.float64))
        self.colors = np.atleast_2d(np.asarray(self.colors, dtype=np.float64))
        n = len(self.positions)
        if not (len(self.rotations) == len(self.log_scales)
                == len(self.opacity_logits) == len(self.colors) == n):
            raise ValueError("Gaussian field arrays disagree on count")

    def __len__(self):
        return len(self.positions)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def subset(self, idx):
        return GaussianCloud(self.positions[idx], self.rotations[idx],
                             self.log_scales[idx], self.opacity_logits[idx],
                             self.colors[idx])

    def copy(self):
        return self.subset(slice(None))

    @staticmethod
    def concatenate(parts):
        return GaussianCloud(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.rotations for p in parts]),
            np.concatenate([p.log_scales for p in parts]),
            np.concatenate([p.opacity_logits for p in parts]),
            np.concatenate([p.colors for p in parts]))


@dataclass
class SurfaceBindings:
    """Per-Gaussian attachment to the host mesh."""
    faces: np.ndarray          # (N,) face indices
    barycentric: np.ndarray    # (N, 3) nonnegative, rows sum to 1
    normal_offsets: np.ndarray  # (N,) meters along the face normal

    def __post_init__(self):
        self.faces = np.atleast_1d(np.asarray(self.faces, dtype=np.int64))
        self.barycentric = np.atleast_2d(
            np.asarray(self.barycentric, dtype=np.float64))
        self.normal_offsets = np.atleast_1d(
            np.asarray(self.normal_offsets, dtype=np.float64))
        if np.any(self.barycentric < -1e-9):
            raise ValueError("barycentric coordinates must be nonnegative")
        sums = self.barycentric.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("barycentric rows must sum to 1")

    def __len__(self):
        return len(self.faces)

    def subset(self, idx):
        return SurfaceBindings(self.faces[idx], self.barycentric[idx],
                               self.normal_offsets[idx])

    @staticmethod
    def concatenate(parts):
        return SurfaceBindings(
            np.concatenate([p.faces for p in parts]),
            np.concatenate([p.barycentric for p in parts]),
            np.concatenate([p.normal_offsets for p in parts]))


@dataclass
class CanonicalAvatar:
    cloud: GaussianCloud
    bindings: SurfaceBindings
    body_model_id: str = ""
    prompt: object = None          # PromptTemplate or None

    def __post_init__(self):
        if len(self.cloud) != len(self.bindings):
            raise ValueError("cloud and bindings must be parallel")

    def __len__(self):
        return len(self.cloud)


def bound_positions(vertices, faces, bindings):
    """Reconstruct Gaussian positions from surface bindings on a mesh."""
    tri = vertices[faces[bindings.faces]]                     # (N, 3, 3)
    pos = np.einsum("nk,nkj->nj", bindings.barycentric, tri)
    normals = face_normals(vertices, faces)[bindings.faces]
    return pos + bindings.normal_offsets[:, None] * normals


def init_avatar(model, n, seed, body_model_id=None, prompt=None):
    """Sample `n` Gaussians area-uniformly over the template mesh.

    Faces are drawn with probability proportional to area and barycentric
    coordinates uniformly on the simplex; opacity starts at exactly 1,
    color mid-gray, scale isotropic at half the host face's mean edge
    length. Deterministic given the seed.
    """
    if n < 1:
        raise ValueError("need at least one Gaussian")
    verts, faces = model.template_vertices, model.faces
    areas = face_areas(verts, faces)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")

    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(faces), size=n, p=areas / total)
    # Uniform on the simplex: sorted uniforms -> spacings.
    u = np.sort(rng.random((n, 2)), axis=1)
    bary = np.stack([u[:, 0], u[:, 1] - u[:, 0], 1.0 - u[:, 1]], axis=1)
    bindings = SurfaceBindings(face_idx, bary, np.zeros(n))

    pos = bound_positions(verts, faces, bindings)
    tri = verts[faces[face_idx]]
    edges = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 1],
                      tri[:, 0] - tri[:, 2]], axis=1)
    mean_edge = np.linalg.norm(edges, axis=2).mean(axis=1)
    log_scales = np.repeat(np.log(0.5 * mean_edge)[:, None], 3, axis=1)

    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    cloud = GaussianCloud(pos, rot, log_scales,
                          np.full(n, _OPAQUE_LOGIT),
                          np.full((n, 3), _INIT_GRAY))
    return CanonicalAvatar(cloud, bindings,
                           body_model_id=body_model_id or model.name,
                           prompt=prompt)


@dataclass
class DensifyConfig:
    start_iter: int = 300
    stop_iter: int = 800
    interval: int = 100
    tau_grad: float = 2e-4        # screen-space positional gradient threshold
    tau_opacity: float = 0.005
    split_factor: float = 1.6     # children shrink by this scale factor
    split_size_frac: float = 0.01  # split-vs-clone boundary as a fraction of
                                   # the body bounding-box diagonal
    seed: int = 0


def _closest_on_triangle(p, a, b, c):
    """Closest point to `p` on triangle (a, b, c) (standard region test)."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0 <= d1 and d3 <= 0:
        return a + (d1 / (d1 - d3)) * ab
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0 <= d2 and d6 <= 0:
        return a + (d2 / (d2 - d6)) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0 and d4 >= d3 and d5 >= d6:
        return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b)
    denom = 1.0 / (va + vb + vc)
    return a + ab * (vb * denom) + ac * (vc * denom)


def _barycentric_of(point, a, b, c):
    """Barycentric coordinates of a point known to lie in triangle (a, b, c)."""
    T = np.stack([b - a, c - a], axis=1)       # (3, 2)
    sol, *_ = np.linalg.lstsq(T, point - a, rcond=None)
    v, w = sol
    bary = np.array([1.0 - v - w, v, w])
    bary = np.clip(bary, 0.0, None)
    return bary / bary.sum()


def densify_and_prune(avatar, model, screen_grads, iteration, cfg=None):
    """One adaptive density step: clone small high-gradient Gaussians,
    split large ones (scale shrunk by `split_factor`), prune transparent
    ones. Runs only inside the scheduled window at the given interval;
    otherwise the avatar comes back unchanged. Never mutates the input."""
    cfg = cfg or DensifyConfig()
    screen_grads = np.asarray(screen_grads, dtype=np.float64)
    if len(screen_grads) != len(avatar):
        raise ValueError("screen_grads must be per-Gaussian")
    if (iteration < cfg.start_iter or iteration > cfg.stop_iter
            or iteration % cfg.interval != 0):
        return avatar

    verts, faces = model.template_vertices, model.faces
    cloud, bindings = avatar.cloud, avatar.bindings
    rng = np.random.default_rng(cfg.seed + iteration)

    bbox_diag = np.linalg.norm(verts.max(axis=0) - verts.min(axis=0))
    size_thresh = cfg.split_size_frac * bbox_diag

    opac = cloud.opacities
    keep = opac >= cfg.tau_opacity
    hot = (screen_grads > cfg.tau_grad) & keep
    big = cloud.scales.max(axis=1) > size_thresh
    split = hot & big
    clone = hot & ~big
    survivors = keep & ~split                  # split parents are replaced

    parts_c = [cloud.subset(survivors)]
    parts_b = [bindings.subset(survivors)]

    if clone.any():
        idx = np.nonzero(clone)[0]
        child_c = cloud.subset(idx)
        child_b = bindings.subset(idx)
        # Fresh barycentric samples on the parent face.
        u = np.sort(rng.random((len(idx), 2)), axis=1)
        child_b.barycentric = np.stack(
            [u[:, 0], u[:, 1] - u[:, 0], 1.0 - u[:, 1]], axis=1)
        child_c.positions = bound_positions(verts, faces, child_b)
        parts_c.append(child_c)
        parts_b.append(child_b)

    if split.any():
        idx = np.nonzero(split)[0]
        normals = face_normals(verts, faces)
        rows_c, rows_b = [], []
        for i in idx:
            tri = verts[faces[bindings.faces[i]]]
            # Children straddle the parent along its longest principal axis.
            R = quat_to_matrix(cloud.rotations[i])
            s = np.exp(cloud.log_scales[i])
            axis = R[:, np.argmax(s)]
            for sign in (-0.5, 0.5):
                p = cloud.positions[i] + sign * s.max() * axis
                on_face = _closest_on_triangle(p, tri[0], tri[1], tri[2])
                bary = _barycentric_of(on_face, tri[0], tri[1], tri[2])
                off = bindings.normal_offsets[i]
                pos = bary @ tri + off * normals[bindings.faces[i]]
                rows_c.append((pos, cloud.rotations[i],
                               cloud.log_scales[i] - np.log(cfg.split_factor),
                               cloud.opacity_logits[i], cloud.colors[i]))
                rows_b.append((bindings.faces[i], bary, off))
        parts_c.append(GaussianCloud(
            np.array([r[0] for r in rows_c]), np.array([r[1] for r in rows_c]),
            np.array([r[2] for r in rows_c]), np.array([r[3] for r in rows_c]),
            np.array([r[4] for r in rows_c])))
        parts_b.append(SurfaceBindings(
            np.array([r[0] for r in rows_b]), np.array([r[1] for r in rows_b]),
            np.array([r[2] for r in rows_b])))

    return CanonicalAvatar(GaussianCloud.concatenate(parts_c),
                           SurfaceBindings.concatenate(parts_b),
                           body_model_id=avatar.body_model_id,
                           prompt=avatar.prompt)


def save_avatar(path, avatar):
    """Write an avatar to a lossless .npz container."""
    prompt_json = "" if avatar.prompt is None else json.dumps(
        asdict(avatar.prompt) if hasattr(avatar.prompt, "__dataclass_fields__")
        else avatar.prompt, sort_keys=True)
    np.savez(path,
             format_version=np.int64(AVATAR_FORMAT_VERSION),
             count=np.int64(len(avatar)),
             body_model_id=np.str_(avatar.body_model_id),
             prompt_json=np.str_(prompt_json),
             positions=avatar.cloud.positions,
             rotations=avatar.cloud.rotations,
             log_scales=avatar.cloud.log_scales,
             opacity_logits=avatar.cloud.opacity_logits,
             colors=avatar.cloud.colors,
             binding_faces=avatar.bindings.faces,
             binding_barycentric=avatar.bindings.barycentric,
             binding_normal_offsets=avatar.bindings.normal_offsets)


def load_avatar(path):
    with np.load(path, allow_pickle=False) as z:
        try:
            version = int(z["format_version"])
            if version != AVATAR_FORMAT_VERSION:
                raise SchemaError(f"unsupported avatar format_version {version}")
            cloud = GaussianCloud(z["positions"], z["rotations"],
                                  z["log_scales"], z["opacity_logits"],
                                  z["colors"])
            bindings = SurfaceBindings(z["binding_faces"],
                                       z["binding_barycentric"],
                                       z["binding_normal_offsets"])
            body_model_id = str(z["body_model_id"])
            prompt_json = str(z["prompt_json"])
        except KeyError as e:
            raise SchemaError(f"avatar file missing field {e}") from e
    prompt = None
    if prompt_json:
        from .prompts import PromptTemplate
        prompt = PromptTemplate(**json.loads(prompt_json))
    return CanonicalAvatar(cloud, bindings, body_model_id=body_model_id,
                           prompt=prompt)
