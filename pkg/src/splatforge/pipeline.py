"""End-to-end dataset generation: subjects -> avatars -> clips -> export.

This module glues the library together into the demo pipeline:

1. sample a body shape and a prompt per subject,
2. fit a canonical avatar against a (mock) denoiser,
3. generate procedural motion clips and a camera per clip,
4. render, shade, shadow and composite every frame,
5. annotate keypoints / boxes and export a split dataset.

Everything is driven by a single integer seed; per-subject and per-clip
generators are spawned from it so the output is reproducible bit for bit
regardless of thread count.
"""

import numpy as np

from .animate import cull_deviants, default_cull_tau, deform
from .avatar import CanonicalAvatar, init_avatar
from .body import (BodyModel, MotionSequence, PoseParams, pose_mesh,
                   regress_joints, make_toy_body)
from .camera import Camera, CameraSamplerConfig, project_points, sample_camera
from .compose import (GroundPlane, Light, SceneAsset, cast_shadow, composite,
                      shade_directional)
from .dataset import (AnnotationRecord, ClipMetadata, DatasetManifest,
                      export_clip, save_manifest, split_subjects,
                      validate_dataset)
from .guidance import (GuidanceConfig, mock_denoiser, optimize_avatar)
from .prompts import (AttributeSpace, PromptTemplate, generate_prompts)
from .rasterizer import RasterConfig, mask_and_bbox, rasterize

# Named colors a prompt can pick for clothing; used as the target appearance
# the mock denoiser pulls the avatar toward during fitting.
CLOTHING_RGB = {
    "red": (0.75, 0.15, 0.15),
    "blue": (0.15, 0.25, 0.75),
    "green": (0.15, 0.6, 0.25),
    "white": (0.9, 0.9, 0.9),
    "black": (0.08, 0.08, 0.08),
    "yellow": (0.85, 0.8, 0.2),
    "orange": (0.9, 0.5, 0.12),
    "purple": (0.5, 0.2, 0.65),
}

ACTIONS = ("swing", "twist", "bend")


def prompt_color(prompt):
    """Clothing color of a prompt as linear RGB (gray fallback)."""
    name = prompt.assignment.get("clothing color", "")
    return np.asarray(CLOTHING_RGB.get(name, (0.5, 0.5, 0.5)), dtype=np.float64)


def make_motion(model, action, n_frames, betas, seed, fps=30.0,
                subject_id="", source_id=""):
    """Procedural joint-angle motion for the toy body.

    Each non-root joint oscillates about an action-specific axis with a
    per-joint frequency and phase, plus a gentle root sway, so clips look
    distinct without any external capture data.
    """
    if action not in ACTIONS:
        raise ValueError("unknown action %r (choose from %s)"
                         % (action, ", ".join(ACTIONS)))
    rng = np.random.default_rng(seed)
    K = model.n_joints
    axis = {"swing": 0, "twist": 1, "bend": 2}[action]
    amp = rng.uniform(0.25, 0.6, size=K)
    freq = rng.uniform(0.5, 1.2, size=K)
    phase = rng.uniform(0.0, 2 * np.pi, size=K)
    amp[0] = 0.0  # root orientation handled separately
    frames = []
    for i in range(n_frames):
        t = i / fps
        body_pose = np.zeros((K, 3))
        body_pose[:, axis] = amp * np.sin(2 * np.pi * freq * t + phase)
        global_orient = np.array([0.0, 0.15 * np.sin(2 * np.pi * 0.3 * t), 0.0])
        translation = np.array([0.04 * np.sin(2 * np.pi * 0.4 * t), 0.0, 0.0])
        frames.append(PoseParams(body_pose=body_pose,
                                 global_orient=global_orient,
                                 translation=translation,
                                 betas=np.asarray(betas, dtype=np.float64)))
    return MotionSequence(frames=frames, action_label=action,
                          subject_id=subject_id, source_id=source_id)


def default_scene(width, height, seed=0):
    """Procedural backdrop: vertical sky gradient, ground plane, one sun."""
    rng = np.random.default_rng(seed)
    top = np.array([0.45, 0.62, 0.85])
    bottom = np.array([0.25, 0.22, 0.2])
    ramp = np.linspace(0.0, 1.0, height)[:, None, None]
    rows = (1.0 - ramp) * top[None, None, :] + ramp * bottom[None, None, :]
    background = np.broadcast_to(rows, (height, width, 3)).copy()
    light_dir = np.array([rng.uniform(-0.6, 0.6), -1.0, rng.uniform(-0.4, 0.4)])
    light_dir /= np.linalg.norm(light_dir)
    light = Light(direction=light_dir, intensity=1.0, ambient=0.35)
    plane = GroundPlane(normal=np.array([0.0, 1.0, 0.0]), offset=0.0)
    return SceneAsset(background=background, ground_plane=plane, light=light,
                      scene_prompt="outdoor field at noon")


def fit_subject_avatar(model, prompt, n_gaussians=600, iterations=40,
                       resolution=96, seed=0, threads=None):
    """Fit a canonical avatar whose colors match the prompt's clothing."""
    avatar = init_avatar(model, n_gaussians, seed=seed, prompt=prompt)
    target = prompt_color(prompt)
    denoiser = mock_denoiser("color_target", value=target, strength=0.6)
    cfg = GuidanceConfig(iterations=iterations, resolution=resolution)
    return optimize_avatar(avatar, model, denoiser, prompt.sentence, cfg,
                           seed=seed, raster_cfg=RasterConfig(threads=threads))


def _camera_for(model, width, height, rng):
    verts = pose_mesh(model, PoseParams.identity(model.n_joints,
                                                 model.n_shape_coeffs)).vertices
    center = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    diag = float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))
    cfg = CameraSamplerConfig(target=center,
                              radius_range=(2.0 * diag, 2.8 * diag),
                              elevation_range=(5.0, 25.0),
                              width=width, height=height)
    return sample_camera(rng, cfg)


def render_clip_frame(avatar, model, params, cam, scene, frame_index=0,
                      raster_cfg=None, tau=None):
    """Deform, cull, shade, render, shadow and composite a single frame.

    Returns the display image in [0, 1] along with the pieces needed for
    annotation (posed joints, alpha mask).
    """
    rcfg = raster_cfg or RasterConfig(background=(0.0, 0.0, 0.0))
    dcloud = deform(avatar, model, params, frame_index=frame_index)
    if tau is not None:
        from .animate import expected_positions
        expected = expected_positions(avatar, model, params)
        dcloud = cull_deviants(dcloud, expected, tau)
    lit = shade_directional(dcloud, scene.light)
    out = rasterize(lit, cam, rcfg)
    shadow = cast_shadow(dcloud, scene, cam)
    img = composite(out, shadow, scene, tonemap=True)
    posed = pose_mesh(model, params)
    joints = regress_joints(model, posed.vertices)
    return img, out, joints


def annotate_frame(out, joints, cam, params, action_label, subject_id,
                   clip_id, frame_index):
    """Build the annotation record for one rendered frame."""
    uv, depth, valid = project_points(cam, joints)
    K = joints.shape[0]
    kp2d = np.zeros((K, 3))
    inside = (valid
              & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width)
              & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height))
    kp2d[:, :2] = np.where(valid[:, None], uv, 0.0)
    kp2d[:, 2] = inside.astype(np.float64)
    _, bbox = mask_and_bbox(out.alpha, threshold=0.5)
    if bbox is None:
        bbox = (0.0, 0.0, 0.0, 0.0)
        kp2d[:, 2] = 0.0  # nothing rendered -> nothing visible
    return AnnotationRecord(
        frame_path="", bbox=tuple(float(v) for v in bbox), kp2d=kp2d,
        kp3d=joints, pose_params=params, action_label=action_label,
        camera=cam, subject_id=subject_id, clip_id=clip_id,
        frame_index=frame_index)


class ClipPlan:
    """Everything needed to render one clip (before any pixels exist)."""

    def __init__(self, clip_id, subject_id, avatar, motion, camera):
        self.clip_id = clip_id
        self.subject_id = subject_id
        self.avatar = avatar
        self.motion = motion
        self.camera = camera

    def metadata(self, keypoint_count):
        return ClipMetadata(clip_id=self.clip_id, subject_id=self.subject_id,
                            action_label=self.motion.action_label,
                            frame_count=len(self.motion.frames),
                            keypoint_count=keypoint_count)


def render_clip(plan, model, scene, raster_cfg=None, tau=None):
    """Render every frame of a clip; returns (images, records)."""
    frames, records = [], []
    for i, params in enumerate(plan.motion.frames):
        img, out, joints = render_clip_frame(
            plan.avatar, model, params, plan.camera, scene,
            frame_index=i, raster_cfg=raster_cfg, tau=tau)
        rec = annotate_frame(out, joints, plan.camera, params,
                             plan.motion.action_label, plan.subject_id,
                             plan.clip_id, i)
        frames.append(img)
        records.append(rec)
    return frames, records


def build_demo_plans(model, seed=0, n_shared=2, clips_per_shared=2,
                     frames_per_clip=30, width=256, height=256,
                     n_gaussians=600, fit_iterations=40, fit_resolution=96,
                     sport="toy", threads=None):
    """Plan the demo dataset: avatars, motions and cameras for every clip.

    ``n_shared`` subjects provide train/valid clips; one extra subject is
    reserved for test so the split has disjoint identities.
    """
    n_subjects = n_shared + 1
    seq = np.random.SeedSequence(seed)
    subj_seeds = seq.spawn(n_subjects)
    space = AttributeSpace.default()
    prompts = generate_prompts(space, n_subjects, scenario=sport, seed=seed)
    plans = []
    clip_counter = 0
    for s in range(n_subjects):
        subject_id = "subj%03d" % s
        srng = np.random.default_rng(subj_seeds[s])
        betas = srng.normal(0.0, 0.8, size=model.n_shape_coeffs)
        avatar = fit_subject_avatar(
            model, prompts[s], n_gaussians=n_gaussians,
            iterations=fit_iterations, resolution=fit_resolution,
            seed=int(srng.integers(0, 2 ** 31)), threads=threads)
        n_clips = clips_per_shared if s < n_shared else 1
        for c in range(n_clips):
            action = ACTIONS[clip_counter % len(ACTIONS)]
            clip_id = "%s_%s_%03d" % (subject_id, action, c)
            motion = make_motion(model, action, frames_per_clip, betas,
                                 seed=int(srng.integers(0, 2 ** 31)),
                                 subject_id=subject_id, source_id=clip_id)
            cam = _camera_for(model, width, height, srng)
            plans.append(ClipPlan(clip_id, subject_id, avatar, motion, cam))
            clip_counter += 1
    return plans


def export_dataset(root, plans, model, scene=None, seed=0, sport="toy",
                   raster_cfg=None, tau=None, valid_clip_fraction=0.25,
                   progress=None):
    """Render all planned clips, split them and write the dataset tree.

    Clips are assigned to train/valid/test before any rendering so each
    lands directly in its split directory. Returns the saved manifest.
    """
    root = str(root)
    K = model.n_joints
    metas = [p.metadata(K) for p in plans]
    manifest = split_subjects(metas, seed=seed, sport=sport,
                              valid_clip_fraction=valid_clip_fraction)
    split_of = {c.clip_id: c.split for c in manifest.clips}
    scene = scene or default_scene(plans[0].camera.width,
                                   plans[0].camera.height, seed=seed)
    import os
    for idx, plan in enumerate(plans):
        if progress is not None:
            progress("clip %d/%d %s" % (idx + 1, len(plans), plan.clip_id))
        frames, records = render_clip(plan, model, scene,
                                      raster_cfg=raster_cfg, tau=tau)
        out_dir = os.path.join(root, split_of[plan.clip_id])
        export_clip(frames, records, out_dir, plan.clip_id,
                    keypoint_count=K)
    save_manifest(root, manifest)
    return manifest


def run_demo(root, seed=7, frames_per_clip=30, width=256, height=256,
             n_gaussians=600, fit_iterations=40, model=None, threads=None,
             progress=None):
    """Generate the full miniature dataset and validate it.

    Returns ``(manifest, report)``; the report lists any integrity
    violations (an empty list means the dataset is clean).
    """
    model = model or make_toy_body()
    plans = build_demo_plans(model, seed=seed, frames_per_clip=frames_per_clip,
                             width=width, height=height,
                             n_gaussians=n_gaussians,
                             fit_iterations=fit_iterations, threads=threads)
    scene = default_scene(width, height, seed=seed)
    manifest = export_dataset(root, plans, model, scene=scene, seed=seed,
                              raster_cfg=RasterConfig(threads=threads),
                              progress=progress)
    report = validate_dataset(root)
    return manifest, report
