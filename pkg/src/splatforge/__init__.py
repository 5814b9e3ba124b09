"""splatforge: synthetic articulated-human dataset generation.

A numpy pipeline that fits Gaussian-splat avatars to prompts under a
(pluggable) denoiser, skins them over procedural motions, renders lit and
shadowed frames with a differentiable tile rasterizer, and exports
annotated, split datasets with integrity checks and keypoint metrics.
"""

from .errors import SplatforgeError, SchemaError, BehindCameraError
from .rotations import (quat_to_matrix, matrix_to_quat, quat_multiply,
                        normalize_quat, axis_angle_to_matrix)
from .body import (BodyModel, PoseParams, MotionSequence, PosedMesh,
                   pose_mesh, skinning_transforms, lbs_transport_points,
                   regress_joints, normalize_shape, face_normals, face_areas,
                   face_tangent_frames, mean_edge_length, make_toy_body,
                   save_motion, load_motion, save_body_model, load_body_model)
from .camera import (Camera, CameraSamplerConfig, intrinsics_from_fov,
                     look_at, sample_camera, project, project_points,
                     WORLD_UP)
from .rasterizer import (RasterConfig, RenderOutput, GaussianGrads,
                         rasterize, rasterize_reference, rasterize_backward,
                         mask_and_bbox, sigmoid)
from .avatar import (GaussianCloud, SurfaceBindings, CanonicalAvatar,
                     DensifyConfig, init_avatar, bound_positions,
                     densify_and_prune, save_avatar, load_avatar)
from .animate import (DeformedCloud, deform, expected_positions,
                      cull_deviants, default_cull_tau)
from .guidance import (GuidanceConfig, PoseMap, MockDenoiser,
                       SubprocessDenoiser, mock_denoiser, render_pose_map,
                       alpha_bar_schedule, normalize_depth,
                       sds_pixel_gradients, default_camera_config,
                       optimize_avatar)
from .images import (save_png, load_png, save_float_image, load_float_image,
                     reinhard, srgb_encode, srgb_decode, to_display)
from .compose import (Light, GroundPlane, SceneAsset, ShadowLayer,
                      RelightBatch, lambert_factors, shade_directional,
                      cast_shadow, composite, relight_consistency_loss,
                      load_scene_asset, save_scene_sidecar)
from .prompts import (AttributeSpace, PromptTemplate, SENTENCE_ATTRIBUTES,
                      render_sentence, generate_prompts, save_prompts,
                      load_prompts, load_attribute_space)
from .dataset import (AnnotationRecord, ClipMetadata, SplitInfo,
                      DatasetManifest, ValidationReport, export_clip,
                      split_subjects, save_manifest, load_manifest,
                      validate_dataset, compute_ap, REPROJECTION_TOL_PX)
from .parallel import resolve_threads, run_tasks, THREADS_ENV_VAR
from .pipeline import (make_motion, default_scene, fit_subject_avatar,
                       render_clip_frame, render_clip, build_demo_plans,
                       export_dataset, run_demo, ClipPlan, ACTIONS)

__version__ = "0.1.0"
