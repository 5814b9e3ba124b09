"""Articulated body model: linear blend skinning, joint regression, motion I/O.

The model is dimension-generic (K joints, M vertices, B shape coefficients).
A procedural toy body (tube mesh around a joint chain) ships for tests and
demos; full-scale models load from the same file formats.

Conventions:
  - canonical space: the zero-beta template at identity pose, world-up +Y
  - global_orient rotates about the world origin (not the root joint), so
    joint regression is rigidly equivariant whenever the regressor rows
    sum to one
  - file formats documented in docs/formats.md
"""

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SchemaError
from .rotations import axis_angle_to_matrix

ROOT_PARENT = -1

MOTION_FORMAT_VERSION = 1
BODY_FORMAT_VERSION = 1


@dataclass
class BodyModel:
    """Template mesh plus skinning/regression data. Immutable after load."""

    template_vertices: np.ndarray   # (M, 3) meters, canonical pose
    faces: np.ndarray               # (F, 3) vertex indices
    rest_joints: np.ndarray         # (K, 3) meters
    skinning_weights: np.ndarray    # (M, K), rows sum to 1
    joint_regressor: np.ndarray     # (K, M), rows sum to 1
    kinematic_parents: np.ndarray   # (K,), root has parent ROOT_PARENT
    shape_basis: np.ndarray         # (M, 3, B)
    name: str = "body"

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.rest_joints = np.asarray(self.rest_joints, dtype=np.float64)
        self.skinning_weights = np.asarray(self.skinning_weights, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.kinematic_parents = np.asarray(self.kinematic_parents, dtype=np.int64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self._validate()

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_joints(self):
        return self.rest_joints.shape[0]

    @property
    def n_shape_coeffs(self):
        return self.shape_basis.shape[2]

    def _validate(self):
        M, K = self.n_vertices, self.n_joints
        if self.template_vertices.shape != (M, 3):
            raise ValueError("template_vertices must be (M, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if self.skinning_weights.shape != (M, K):
            raise ValueError(f"skinning_weights must be ({M}, {K}), got {self.skinning_weights.shape}")
        if self.joint_regressor.shape != (K, M):
            raise ValueError(f"joint_regressor must be ({K}, {M}), got {self.joint_regressor.shape}")
        if self.kinematic_parents.shape != (K,):
            raise ValueError("kinematic_parents must be (K,)")
        if self.shape_basis.shape[:2] != (M, 3):
            raise ValueError("shape_basis must be (M, 3, B)")

        if np.any(self.skinning_weights < 0):
            raise ValueError("skinning_weights must be nonnegative")
        if not np.allclose(self.skinning_weights.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("skinning_weights rows must sum to 1")
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("joint_regressor rows must sum to 1")

        if np.any(self.faces < 0) or np.any(self.faces >= M):
            raise ValueError("face indices out of range")

        roots = np.flatnonzero(self.kinematic_parents == ROOT_PARENT)
        if len(roots) != 1:
            raise ValueError("kinematic_parents must have exactly one root")
        others = self.kinematic_parents[self.kinematic_parents != ROOT_PARENT]
        if np.any(others < 0) or np.any(others >= K):
            raise ValueError("parent indices out of range")
        # Acyclic: every joint must reach the root in at most K steps.
        for k in range(K):
            j, steps = k, 0
            while self.kinematic_parents[j] != ROOT_PARENT:
                j = int(self.kinematic_parents[j])
                steps += 1
                if steps > K:
                    raise ValueError("kinematic_parents contains a cycle")


@dataclass
class PoseParams:
    """Per-frame pose: per-joint axis-angle, global rigid transform, shape."""

    body_pose: np.ndarray      # (K, 3) axis-angle, radians
    global_orient: np.ndarray  # (3,) axis-angle
    translation: np.ndarray    # (3,) meters
    betas: np.ndarray          # (B,)

    def __post_init__(self):
        self.body_pose = np.asarray(self.body_pose, dtype=np.float64)
        self.global_orient = np.asarray(self.global_orient, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.betas = np.asarray(self.betas, dtype=np.float64)
        for name in ("body_pose", "global_orient", "translation", "betas"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")

    @classmethod
    def identity(cls, n_joints, n_shape_coeffs):
        return cls(
            body_pose=np.zeros((n_joints, 3)),
            global_orient=np.zeros(3),
            translation=np.zeros(3),
            betas=np.zeros(n_shape_coeffs),
        )


@dataclass
class MotionSequence:
    frames: list                # list[PoseParams], >= 1 frame
    action_label: str
    subject_id: str
    source_id: str = ""

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ValueError("motion sequence needs at least one frame")

    def __len__(self):
        return len(self.frames)


@dataclass
class PosedMesh:
    vertices: np.ndarray     # (M, 3) posed, meters
    face_frames: np.ndarray  # (F, 3, 3) canonical->posed tangent-frame rotations


def face_tangent_frames(vertices, faces):
    """Orthonormal per-face frames: first edge, normal, their cross product.

    Returns (F, 3, 3) with the basis vectors as COLUMNS, so frame @ [1,0,0]
    is the (unit) first-edge direction.
    """
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    e1 = v1 - v0
    e2 = v2 - v0
    n = np.cross(e1, e2)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    t = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    # Gram-Schmidt: t is orthogonal to n already (t lies in the face plane),
    # but re-project to keep the frame orthonormal under roundoff.
    t = t - (t * n).sum(axis=1, keepdims=True) * n
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    b = np.cross(n, t)
    return np.stack([t, b, n], axis=2)


def face_normals(vertices, faces):
    """Unit face normals, (F, 3)."""
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    n = np.cross(e1, e2)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def face_areas(vertices, faces):
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def mean_edge_length(model):
    v, f = model.template_vertices, model.faces
    e = np.concatenate([
        v[f[:, 1]] - v[f[:, 0]],
        v[f[:, 2]] - v[f[:, 1]],
        v[f[:, 0]] - v[f[:, 2]],
    ])
    return float(np.linalg.norm(e, axis=1).mean())


def _check_params(model, params):
    K, B = model.n_joints, model.n_shape_coeffs
    if params.body_pose.shape != (K, 3):
        raise ValueError(f"body_pose must be ({K}, 3), got {params.body_pose.shape}")
    if params.betas.shape != (B,):
        raise ValueError(f"betas must be ({B},), got {params.betas.shape}")


def skinning_transforms(model, params):
    """Per-joint skinning transforms A (K, 4, 4) plus the global (R, t).

    Points skinned as sum_k w_k * (A_k @ [p; 1]) land in posed body space;
    the global rigid transform (about the world origin) maps them to world.
    """
    _check_params(model, params)
    shaped = model.template_vertices + model.shape_basis @ params.betas
    joints = model.joint_regressor @ shaped
    R_local = axis_angle_to_matrix(params.body_pose)  # (K, 3, 3)

    K = model.n_joints
    order = _topological_order(model.kinematic_parents)
    G = np.zeros((K, 4, 4))
    for k in order:
        p = int(model.kinematic_parents[k])
        T = np.eye(4)
        T[:3, :3] = R_local[k]
        if p == ROOT_PARENT:
            T[:3, 3] = joints[k]
            G[k] = T
        else:
            T[:3, 3] = joints[k] - joints[p]
            G[k] = G[p] @ T

    # Subtract the rest-joint offset: A_k = G_k @ [I | -j_k].
    A = G.copy()
    A[:, :3, 3] -= np.einsum("kij,kj->ki", G[:, :3, :3], joints)

    R_glob = axis_angle_to_matrix(params.global_orient)
    return A, R_glob, np.asarray(params.translation, dtype=np.float64), shaped


def _topological_order(parents):
    order, seen = [], set()

    def visit(k):
        if k in seen:
            return
        p = int(parents[k])
        if p != ROOT_PARENT:
            visit(p)
        seen.add(k)
        order.append(k)

    for k in range(len(parents)):
        visit(k)
    return order


def lbs_transport_points(model, params, points, weights):
    """Transport arbitrary canonical points by LBS with given per-point weights.

    points: (N, 3); weights: (N, K) rows summing to 1. Used for the culling
    reference ("expected") positions.
    """
    A, R_glob, t, _ = skinning_transforms(model, params)
    ph = np.concatenate([points, np.ones((len(points), 1))], axis=1)  # (N, 4)
    # (N, K) x (K, 4, 4) x (N, 4) -> (N, 3)
    per_joint = np.einsum("kij,nj->nki", A[:, :3, :], ph)  # (N, K, 3)
    posed = np.einsum("nk,nki->ni", weights, per_joint)
    return posed @ R_glob.T + t


def pose_mesh(model, params):
    """Forward LBS: shape blend, per-joint rigid transforms, global transform.

    Returns the posed vertices together with per-face rotations mapping each
    face's zero-beta canonical tangent frame to its posed tangent frame.
    """
    A, R_glob, t, shaped = skinning_transforms(model, params)

    M = model.n_vertices
    vh = np.concatenate([shaped, np.ones((M, 1))], axis=1)
    # T_v = sum_k w_vk A_k, applied per vertex.
    T = np.einsum("mk,kij->mij", model.skinning_weights, A[:, :3, :])  # (M, 3, 4)
    posed = np.einsum("mij,mj->mi", T, vh)
    world = posed @ R_glob.T + t

    canon = face_tangent_frames(model.template_vertices, model.faces)
    now = face_tangent_frames(world, model.faces)
    frames = now @ np.swapaxes(canon, 1, 2)
    return PosedMesh(vertices=world, face_frames=frames)


def regress_joints(model, vertices):
    """Joint positions as the regressor applied to (M, 3) vertices."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.shape != (model.n_vertices, 3):
        raise ValueError(
            f"expected ({model.n_vertices}, 3) vertices, got {vertices.shape}"
        )
    return model.joint_regressor @ vertices


def normalize_shape(seq):
    """Replace every frame's betas with their arithmetic mean over the sequence."""
    betas = np.mean([f.betas for f in seq.frames], axis=0)
    frames = [replace(f, betas=betas.copy()) for f in seq.frames]
    return replace(seq, frames=frames)


# ---------------------------------------------------------------------------
# Motion file I/O (JSON; schema in docs/formats.md)
# ---------------------------------------------------------------------------

def save_motion(path, seq):
    K = seq.frames[0].body_pose.shape[0]
    B = seq.frames[0].betas.shape[0]
    doc = {
        "format_version": MOTION_FORMAT_VERSION,
        "K": K,
        "B": B,
        "action_label": seq.action_label,
        "subject_id": seq.subject_id,
        "source_id": seq.source_id,
        "frames": [
            {
                "body_pose": f.body_pose.tolist(),
                "global_orient": f.global_orient.tolist(),
                "translation": f.translation.tolist(),
                "betas": f.betas.tolist(),
            }
            for f in seq.frames
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_motion(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}: not valid JSON: {e}") from e

    for key in ("format_version", "K", "B", "action_label", "subject_id", "frames"):
        if key not in doc:
            raise SchemaError(f"{path}: missing key '{key}'")
    if doc["format_version"] != MOTION_FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported format_version {doc['format_version']}")
    K, B = int(doc["K"]), int(doc["B"])
    if not doc["frames"]:
        raise SchemaError(f"{path}: empty frame list")

    frames = []
    for i, fr in enumerate(doc["frames"]):
        for key in ("body_pose", "global_orient", "translation", "betas"):
            if key not in fr:
                raise SchemaError(f"{path}: frame {i} missing '{key}'")
        body_pose = np.asarray(fr["body_pose"], dtype=np.float64)
        betas = np.asarray(fr["betas"], dtype=np.float64)
        if body_pose.shape != (K, 3):
            raise SchemaError(
                f"{path}: frame {i} body_pose has shape {body_pose.shape}, header says K={K}"
            )
        if betas.shape != (B,):
            raise SchemaError(
                f"{path}: frame {i} betas has shape {betas.shape}, header says B={B}"
            )
        frames.append(PoseParams(
            body_pose=body_pose,
            global_orient=np.asarray(fr["global_orient"], dtype=np.float64),
            translation=np.asarray(fr["translation"], dtype=np.float64),
            betas=betas,
        ))
    return MotionSequence(
        frames=frames,
        action_label=doc["action_label"],
        subject_id=doc["subject_id"],
        source_id=doc.get("source_id", ""),
    )


# ---------------------------------------------------------------------------
# Body model file I/O (JSON or NPZ; same field names)
# ---------------------------------------------------------------------------

_BODY_FIELDS = (
    "template_vertices", "faces", "rest_joints", "skinning_weights",
    "joint_regressor", "kinematic_parents", "shape_basis",
)


def save_body_model(path, model):
    path = str(path)
    if path.endswith(".json"):
        doc = {"format_version": BODY_FORMAT_VERSION, "name": model.name}
        for f in _BODY_FIELDS:
            doc[f] = getattr(model, f).tolist()
        with open(path, "w") as fh:
            json.dump(doc, fh)
    else:
        arrays = {f: getattr(model, f) for f in _BODY_FIELDS}
        np.savez(path, format_version=BODY_FORMAT_VERSION, name=model.name, **arrays)


def load_body_model(path):
    path = str(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if path.endswith(".json"):
        with open(path) as fh:
            doc = json.load(fh)
        getter, name = doc.get, doc.get("name", "body")
    else:
        npz = np.load(path, allow_pickle=False)
        getter, name = npz.get, str(npz["name"]) if "name" in npz else "body"
    fields = {}
    for f in _BODY_FIELDS:
        val = getter(f)
        if val is None:
            raise SchemaError(f"{path}: missing field '{f}'")
        fields[f] = np.asarray(val)
    try:
        return BodyModel(name=name, **fields)
    except ValueError as e:
        raise SchemaError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# Procedural toy body: a tube mesh around a vertical joint chain
# ---------------------------------------------------------------------------

def make_toy_body(n_joints=4, ring_count=4, ring_size=8, height=1.0,
                  radius=0.08, n_shape_coeffs=2, name="toy"):
    """Tube mesh around a +Y joint chain; default K=4, M=32 test skeleton.

    Skinning and regression weights are Gaussian in height around each
    joint, so rows sum to one and the model exercises multi-joint blending.
    """
    ring_y = (np.arange(ring_count) + 0.5) * height / ring_count
    theta = np.arange(ring_size) * 2 * math.pi / ring_size
    verts = np.zeros((ring_count * ring_size, 3))
    for j, y in enumerate(ring_y):
        sl = slice(j * ring_size, (j + 1) * ring_size)
        verts[sl, 0] = radius * np.cos(theta)
        verts[sl, 1] = y
        verts[sl, 2] = radius * np.sin(theta)

    faces = []
    for j in range(ring_count - 1):
        for i in range(ring_size):
            a = j * ring_size + i
            b = j * ring_size + (i + 1) % ring_size
            c = (j + 1) * ring_size + i
            d = (j + 1) * ring_size + (i + 1) % ring_size
            faces.append((a, b, c))
            faces.append((b, d, c))
    faces = np.asarray(faces, dtype=np.int64)

    joint_y = np.arange(n_joints) * height / n_joints
    sigma = height / (2.0 * n_joints)
    dy = verts[:, 1:2] - joint_y[None, :]            # (M, K)
    w = np.exp(-0.5 * (dy / sigma) ** 2)
    skinning = w / w.sum(axis=1, keepdims=True)

    g = np.exp(-0.5 * (dy.T / sigma) ** 2)           # (K, M)
    regressor = g / g.sum(axis=1, keepdims=True)
    rest_joints = regressor @ verts

    basis = np.zeros((len(verts), 3, n_shape_coeffs))
    if n_shape_coeffs >= 1:
        basis[:, 0, 0] = verts[:, 0]                 # radial
        basis[:, 2, 0] = verts[:, 2]
    if n_shape_coeffs >= 2:
        basis[:, 1, 1] = verts[:, 1] - height / 2.0  # stretch about mid-height

    parents = np.arange(n_joints) - 1
    return BodyModel(
        template_vertices=verts,
        faces=faces,
        rest_joints=rest_joints,
        skinning_weights=skinning,
        joint_regressor=regressor,
        kinematic_parents=parents,
        shape_basis=basis,
        name=name,
    )
