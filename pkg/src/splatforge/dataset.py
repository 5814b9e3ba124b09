"""Dataset assembly: annotation records, manifest and subject-disjoint
splits, clip export, validation, and threshold-based 2D pose AP.

Directory layout:

    root/
      manifest.json
      <split>/<clip_id>/
        frames/000000.png ...
        annotations.jsonl        # one record per frame

All JSON field names are frozen in data/annotation_schema.json. Keypoint
3D coordinates are stored in the world frame together with the full
camera, so annotations can be re-verified by reprojection (visible
keypoints must land within 0.5 px of their stored 2D positions).
"""

import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .body import PoseParams
from .camera import Camera, project_points
from .errors import SchemaError
from .images import save_png

MANIFEST_FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "valid", "test")
REPROJECTION_TOL_PX = 0.5

_SCHEMA_FILE = Path(__file__).parent / "data" / "annotation_schema.json"


def _schema():
    with open(_SCHEMA_FILE) as f:
        return json.load(f)


@dataclass
class AnnotationRecord:
    frame_path: str            # relative to the clip directory
    bbox: tuple                # (x, y, w, h) pixels, or None when empty
    kp2d: np.ndarray           # (K, 3): u, v, visibility
    kp3d: np.ndarray           # (K, 3) world-frame meters
    pose_params: PoseParams
    action_label: str
    camera: Camera
    subject_id: str
    clip_id: str
    frame_index: int
    kp3d_frame: str = "world"

    def __post_init__(self):
        self.kp2d = np.asarray(self.kp2d, dtype=np.float64)
        self.kp3d = np.asarray(self.kp3d, dtype=np.float64)
        if self.kp2d.ndim != 2 or self.kp2d.shape[1] != 3:
            raise ValueError("kp2d must be (K, 3)")
        if self.kp3d.shape != (self.kp2d.shape[0], 3):
            raise ValueError("kp3d must be (K, 3) matching kp2d")

    @property
    def n_keypoints(self):
        return self.kp2d.shape[0]

    def to_json(self):
        p = self.pose_params
        return {
            "frame_path": self.frame_path,
            "bbox": None if self.bbox is None else [int(v) for v in self.bbox],
            "kp2d": self.kp2d.tolist(),
            "kp3d": self.kp3d.tolist(),
            "kp3d_frame": self.kp3d_frame,
            "pose_params": {"body_pose": p.body_pose.tolist(),
                            "global_orient": p.global_orient.tolist(),
                            "translation": p.translation.tolist(),
                            "betas": p.betas.tolist()},
            "action_label": self.action_label,
            "camera": self.camera.to_dict(),
            "subject_id": self.subject_id,
            "clip_id": self.clip_id,
            "frame_index": self.frame_index,
        }

    @classmethod
    def from_json(cls, d):
        pp = d["pose_params"]
        return cls(frame_path=d["frame_path"],
                   bbox=None if d["bbox"] is None else tuple(d["bbox"]),
                   kp2d=np.asarray(d["kp2d"]), kp3d=np.asarray(d["kp3d"]),
                   pose_params=PoseParams(np.asarray(pp["body_pose"]),
                                          np.asarray(pp["global_orient"]),
                                          np.asarray(pp["translation"]),
                                          np.asarray(pp["betas"])),
                   action_label=d["action_label"],
                   camera=Camera.from_dict(d["camera"]),
                   subject_id=d["subject_id"], clip_id=d["clip_id"],
                   frame_index=d["frame_index"],
                   kp3d_frame=d.get("kp3d_frame", "world"))


@dataclass
class ClipMetadata:
    clip_id: str
    subject_id: str
    action_label: str
    frame_count: int
    keypoint_count: int
    split: str = ""


@dataclass
class SplitInfo:
    subject_ids: list
    clip_count: int
    frame_count: int


@dataclass
class DatasetManifest:
    sport: str
    keypoint_count: int
    splits: dict                # name -> SplitInfo
    clips: list                 # ClipMetadata with split set
    format_version: int = MANIFEST_FORMAT_VERSION

    def to_json(self):
        return {
            "format_version": self.format_version,
            "sport": self.sport,
            "keypoint_count": self.keypoint_count,
            "splits": {name: {"subject_ids": s.subject_ids,
                              "clip_count": s.clip_count,
                              "frame_count": s.frame_count}
                       for name, s in self.splits.items()},
            "clips": [{"clip_id": c.clip_id, "split": c.split,
                       "subject_id": c.subject_id,
                       "action_label": c.action_label,
                       "frame_count": c.frame_count}
                      for c in self.clips],
        }

    @classmethod
    def from_json(cls, d):
        try:
            splits = {name: SplitInfo(list(s["subject_ids"]),
                                      int(s["clip_count"]),
                                      int(s["frame_count"]))
                      for name, s in d["splits"].items()}
            clips = [ClipMetadata(c["clip_id"], c["subject_id"],
                                  c["action_label"], int(c["frame_count"]),
                                  int(d["keypoint_count"]), c["split"])
                     for c in d["clips"]]
            return cls(sport=d["sport"], keypoint_count=int(d["keypoint_count"]),
                       splits=splits, clips=clips,
                       format_version=int(d["format_version"]))
        except KeyError as e:
            raise SchemaError(f"manifest missing key {e}") from e


def save_manifest(root, manifest):
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(root):
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path) as f:
        return DatasetManifest.from_json(json.load(f))


def export_clip(frames, records, out_dir, clip_id, keypoint_count=None):
    """Write one clip: frames/NNNNNN.png plus annotations.jsonl.

    `out_dir` is the split directory; the clip directory is created under
    it. Returns the clip's metadata fragment.
    """
    if len(frames) != len(records):
        raise ValueError(f"{len(frames)} frames but {len(records)} records")
    if not records:
        raise ValueError("cannot export an empty clip")
    ks = {r.n_keypoints for r in records}
    if len(ks) != 1:
        raise SchemaError(f"records disagree on keypoint count: {sorted(ks)}")
    k = ks.pop()
    if keypoint_count is not None and k != keypoint_count:
        raise SchemaError(f"records carry {k} keypoints but the manifest "
                          f"expects {keypoint_count}")

    clip_dir = os.path.join(out_dir, clip_id)
    frames_dir = os.path.join(clip_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    with open(os.path.join(clip_dir, "annotations.jsonl"), "w") as f:
        for i, (img, rec) in enumerate(zip(frames, records)):
            name = f"{i:06d}.png"
            save_png(os.path.join(frames_dir, name), img, tonemap=False)
            rec.frame_path = os.path.join("frames", name)
            rec.clip_id = clip_id
            rec.frame_index = i
            f.write(json.dumps(rec.to_json(), sort_keys=True))
            f.write("\n")

    subject_ids = {r.subject_id for r in records}
    actions = {r.action_label for r in records}
    return ClipMetadata(clip_id=clip_id, subject_id=sorted(subject_ids)[0],
                        action_label=sorted(actions)[0],
                        frame_count=len(records), keypoint_count=k)


def split_subjects(clips, ratios=(0.75, 0.25), seed=0, sport="toy",
                   valid_clip_fraction=0.2):
    """Assign clips to train/valid/test with a subject-disjoint test set.

    `ratios` weights (train+valid, test) subject pools; test always gets at
    least one subject and at least one subject remains for train/valid
    (error otherwise). Train and valid share subjects but never clips.
    """
    clips = list(clips)
    if not clips:
        raise ValueError("no clips to split")
    subjects = sorted({c.subject_id for c in clips})
    if len(subjects) < 2:
        raise ValueError("need at least 2 subjects for a disjoint test split")
    ks = {c.keypoint_count for c in clips}
    if len(ks) != 1:
        raise SchemaError(f"clips disagree on keypoint count: {sorted(ks)}")

    rng = np.random.default_rng(seed)
    order = list(rng.permutation(subjects))
    w_tv, w_test = ratios
    n_test = int(round(len(subjects) * w_test / (w_tv + w_test)))
    n_test = min(max(n_test, 1), len(subjects) - 1)
    test_subjects = set(order[:n_test])

    test_clips, pool = [], []
    for c in clips:
        (test_clips if c.subject_id in test_subjects else pool).append(c)
    pool_idx = rng.permutation(len(pool))
    n_valid = int(round(len(pool) * valid_clip_fraction))
    valid_set = {pool[i].clip_id for i in pool_idx[:n_valid]}

    out_clips = []
    for c in clips:
        if c.subject_id in test_subjects:
            split = "test"
        elif c.clip_id in valid_set:
            split = "valid"
        else:
            split = "train"
        out_clips.append(ClipMetadata(c.clip_id, c.subject_id, c.action_label,
                                      c.frame_count, c.keypoint_count, split))

    splits = {}
    for name in SPLIT_NAMES:
        members = [c for c in out_clips if c.split == name]
        splits[name] = SplitInfo(
            subject_ids=sorted({c.subject_id for c in members}),
            clip_count=len(members),
            frame_count=sum(c.frame_count for c in members))
    return DatasetManifest(sport=sport, keypoint_count=ks.pop(),
                           splits=splits, clips=out_clips)


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def add(self, msg):
        self.violations.append(msg)


def _validate_record(rep, where, d, manifest):
    schema = _schema()
    missing = [f for f in schema["annotation_fields"] if f not in d]
    extra = [f for f in d if f not in schema["annotation_fields"]]
    for f in missing:
        rep.add(f"{where}: missing field {f!r}")
    for f in extra:
        rep.add(f"{where}: unknown field {f!r}")
    if missing:
        return None
    try:
        rec = AnnotationRecord.from_json(d)
    except Exception as e:
        rep.add(f"{where}: unreadable record ({e})")
        return None

    if rec.n_keypoints != manifest.keypoint_count:
        rep.add(f"{where}: {rec.n_keypoints} keypoints, manifest says "
                f"{manifest.keypoint_count}")
    W, H = rec.camera.width, rec.camera.height
    vis = rec.kp2d[:, 2] > 0
    for j in np.nonzero(vis)[0]:
        u, v = rec.kp2d[j, 0], rec.kp2d[j, 1]
        if not (0 <= u < W and 0 <= v < H):
            rep.add(f"{where}: visible keypoint {j} at ({u:.1f}, {v:.1f}) "
                    f"outside the {W}x{H} image")
    if rec.bbox is not None:
        x, y, w, h = rec.bbox
        if w <= 0 or h <= 0:
            rep.add(f"{where}: bbox {rec.bbox} has nonpositive area")
    elif vis.any():
        rep.add(f"{where}: visible keypoints but no bbox")

    if vis.any():
        uv, _, valid = project_points(rec.camera, rec.kp3d)
        for j in np.nonzero(vis)[0]:
            if not valid[j]:
                rep.add(f"{where}: visible keypoint {j} reprojects behind "
                        "the camera")
                continue
            err = float(np.hypot(*(uv[j] - rec.kp2d[j, :2])))
            if err > REPROJECTION_TOL_PX:
                rep.add(f"{where}: keypoint {j} reprojection error "
                        f"{err:.3f} px exceeds {REPROJECTION_TOL_PX}")
    return rec


def validate_dataset(root):
    """Check every manifest/annotation invariant plus file existence.

    Returns a ValidationReport; an empty violations list means the dataset
    is internally consistent.
    """
    rep = ValidationReport()
    try:
        manifest = load_manifest(root)
    except FileNotFoundError:
        raise
    except (SchemaError, json.JSONDecodeError) as e:
        rep.add(f"manifest.json: {e}")
        return rep

    schema = _schema()
    m = manifest.to_json()
    for f in schema["manifest_fields"]:
        if f not in m:
            rep.add(f"manifest.json: missing field {f!r}")

    test_subj = set(manifest.splits.get("test", SplitInfo([], 0, 0)).subject_ids)
    for name in ("train", "valid"):
        overlap = test_subj & set(
            manifest.splits.get(name, SplitInfo([], 0, 0)).subject_ids)
        if overlap:
            rep.add(f"test subjects {sorted(overlap)} also appear in {name}")

    for name, info in manifest.splits.items():
        members = [c for c in manifest.clips if c.split == name]
        if len(members) != info.clip_count:
            rep.add(f"split {name}: clip_count {info.clip_count} but "
                    f"{len(members)} clips listed")
        total = sum(c.frame_count for c in members)
        if total != info.frame_count:
            rep.add(f"split {name}: frame_count {info.frame_count} but clips "
                    f"sum to {total}")

    for clip in manifest.clips:
        clip_dir = os.path.join(root, clip.split, clip.clip_id)
        ann_path = os.path.join(clip_dir, "annotations.jsonl")
        if not os.path.exists(ann_path):
            rep.add(f"{clip.clip_id}: missing {ann_path}")
            continue
        with open(ann_path) as f:
            lines = [ln for ln in f.readlines() if ln.strip()]
        if len(lines) != clip.frame_count:
            rep.add(f"{clip.clip_id}: {len(lines)} annotation lines, manifest "
                    f"says {clip.frame_count}")
        for ln_no, line in enumerate(lines):
            where = f"{clip.split}/{clip.clip_id}#L{ln_no}"
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                rep.add(f"{where}: bad JSON ({e})")
                continue
            rec = _validate_record(rep, where, d, manifest)
            if rec is None:
                continue
            frame_file = os.path.join(clip_dir, rec.frame_path)
            if not os.path.exists(frame_file):
                rep.add(f"{where}: frame file {rec.frame_path} missing")
            if rec.subject_id != clip.subject_id:
                rep.add(f"{where}: subject {rec.subject_id!r} but clip is "
                        f"{clip.subject_id!r}")
    return rep


def compute_ap(preds, gts, thresholds=(5, 10, 15)):
    """Pixel-threshold pose AP: 100 x the per-frame mean fraction of
    visible keypoints whose prediction lies within k pixels of the truth.

    `preds` is per-frame (K, 2); `gts` per-frame (K, 3) with a visibility
    flag in the last column. Frames without visible keypoints are skipped;
    if no frame has any, that's an error.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction frames vs {len(gts)} truth")
    fracs = {k: [] for k in thresholds}
    for i, (p, g) in enumerate(zip(preds, gts)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != (g.shape[0], 2) or g.shape[1] != 3:
            raise ValueError(f"frame {i}: expected (K,2) preds and (K,3) truth")
        vis = g[:, 2] > 0
        if not vis.any():
            continue
        dist = np.linalg.norm(p[vis] - g[vis, :2], axis=1)
        for k in thresholds:
            fracs[k].append(float(np.mean(dist <= k)))
    if not fracs[thresholds[0]]:
        raise ValueError("no frame has any visible keypoint")
    return {k: 100.0 * float(np.mean(v)) for k, v in fracs.items()}
