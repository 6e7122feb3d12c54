from .align import alignment_residual, apply_similarity, umeyama_align
from .camera import (
    CameraIntrinsics,
    Pose,
    backproject,
    heading_pitch_rotation,
    project,
    project_points,
    skew,
)
from .pnp import N_PNP_MIN, REPROJ_THRESHOLD_PX, p3p, refine_pose, solve_pnp
from .twoview import (
    MIN_RELPOSE_INLIERS,
    SAMPSON_THRESHOLD_PX,
    THETA_TRI_MIN_DEG,
    bearing_angles,
    estimate_relative_pose,
    ransac_fundamental,
    refine_relative_pose,
    eight_point,
    essential_from_fundamental,
    ray_angles,
    sampson_sq,
    fundamental_from_essential,
    triangulate,
    triangulate_pairs,
)

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "alignment_residual",
    "apply_similarity",
    "backproject",
    "bearing_angles",
    "estimate_relative_pose",
    "fundamental_from_essential",
    "heading_pitch_rotation",
    "p3p",
    "project",
    "project_points",
    "ransac_fundamental",
    "refine_relative_pose",
    "eight_point",
    "essential_from_fundamental",
    "ray_angles",
    "refine_pose",
    "sampson_sq",
    "skew",
    "solve_pnp",
    "triangulate",
    "triangulate_pairs",
    "umeyama_align",
    "MIN_RELPOSE_INLIERS",
    "N_PNP_MIN",
    "REPROJ_THRESHOLD_PX",
    "SAMPSON_THRESHOLD_PX",
    "THETA_TRI_MIN_DEG",
]
