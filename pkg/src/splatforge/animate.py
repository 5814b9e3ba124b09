"""Per-frame avatar deformation through surface bindings, with culling of
Gaussians that stray too far from where skinning says they should be.

Deformation is purely geometric: posed positions come from barycentric
interpolation of the posed host face plus the stored normal offset, and
orientations are composed with the face's canonical-to-posed frame
rotation. Scales, opacities and colors never change here. Each frame is a
pure function of (avatar, params), so frames can be processed in parallel.
"""

from dataclasses import dataclass

import numpy as np

from .avatar import GaussianCloud
from .body import (face_normals, lbs_transport_points, mean_edge_length,
                   pose_mesh)
from .rotations import matrix_to_quat, quat_multiply


@dataclass
class DeformedCloud:
    """World-space Gaussians for one motion frame."""
    cloud: GaussianCloud
    kept_indices: np.ndarray    # indices into the canonical avatar
    frame_index: int = 0
    normals: np.ndarray = None  # (N, 3) posed host-face normals (shading)

    def __post_init__(self):
        self.kept_indices = np.atleast_1d(
            np.asarray(self.kept_indices, dtype=np.int64))
        if len(self.kept_indices) != len(self.cloud):
            raise ValueError("kept_indices must be parallel to the cloud")
        if len(self.kept_indices) > 1 and np.any(np.diff(self.kept_indices) <= 0):
            raise ValueError("kept_indices must be strictly increasing")
        if self.normals is None:
            self.normals = np.zeros((len(self.cloud), 3))
            self.normals[:, 1] = 1.0
        self.normals = np.atleast_2d(np.asarray(self.normals, dtype=np.float64))

    def __len__(self):
        return len(self.cloud)

    # Rasterizer-facing views.
    @property
    def positions(self):
        return self.cloud.positions

    @property
    def rotations(self):
        return self.cloud.rotations

    @property
    def log_scales(self):
        return self.cloud.log_scales

    @property
    def opacity_logits(self):
        return self.cloud.opacity_logits

    @property
    def colors(self):
        return self.cloud.colors


def deform(avatar, model, params, frame_index=0):
    """Pose the avatar for one frame via its surface bindings."""
    b = avatar.bindings
    if np.any(b.faces < 0) or np.any(b.faces >= len(model.faces)):
        raise ValueError("binding refers to a nonexistent face")

    posed = pose_mesh(model, params)
    tri = posed.vertices[model.faces[b.faces]]                 # (N, 3, 3)
    normals = face_normals(posed.vertices, model.faces)[b.faces]
    pos = np.einsum("nk,nkj->nj", b.barycentric, tri) \
        + b.normal_offsets[:, None] * normals

    frame_quats = matrix_to_quat(posed.face_frames[b.faces])
    rot = quat_multiply(frame_quats, avatar.cloud.rotations)

    cloud = GaussianCloud(pos, rot, avatar.cloud.log_scales.copy(),
                          avatar.cloud.opacity_logits.copy(),
                          avatar.cloud.colors.copy())
    return DeformedCloud(cloud, np.arange(len(avatar)), frame_index,
                         normals=normals)


def expected_positions(avatar, model, params):
    """Where skinning alone would carry each Gaussian: the canonical
    position transported by LBS with the barycentrically interpolated
    skinning weights of its bound face."""
    b = avatar.bindings
    vert_ids = model.faces[b.faces]                            # (N, 3)
    w_verts = model.skinning_weights[vert_ids]                 # (N, 3, K)
    weights = np.einsum("nk,nkj->nj", b.barycentric, w_verts)  # (N, K)
    return lbs_transport_points(model, params, avatar.cloud.positions, weights)


def cull_deviants(dcloud, expected, tau):
    """Drop Gaussians whose actual position deviates from the expected one
    by more than `tau` meters. Order is preserved."""
    expected = np.asarray(expected, dtype=np.float64)
    if len(expected) != len(dcloud):
        raise ValueError("expected positions must be per-Gaussian")
    dev = np.linalg.norm(dcloud.cloud.positions - expected, axis=1)
    keep = dev <= tau
    return DeformedCloud(dcloud.cloud.subset(keep),
                         dcloud.kept_indices[keep], dcloud.frame_index,
                         normals=dcloud.normals[keep])


def default_cull_tau(model):
    """Default deviation threshold: 3x the template's mean edge length."""
    return 3.0 * mean_edge_length(model)
