"""Similarity estimation between partial maps and map fusion."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateGeometry
from ..geometry import Pose, project_points, umeyama_align
from ..mapper import SparseMap


def similarity_from_pose_pairs(src_poses, dst_poses):
    """World similarity ``X_dst = s R X_src + t`` from the same cameras posed in two maps.

    Camera centers are aligned with Umeyama. A (near) straight flight line makes
    centers collinear; then the rotation comes from the averaged relative camera
    orientations and only scale and translation are fitted to the centers.
    """
    cs = np.array([p.center for p in src_poses])
    cd = np.array([p.center for p in dst_poses])
    if len(cs) < 2:
        raise DegenerateGeometry("need at least two bridge poses")
    try:
        s, R, t = umeyama_align(cs, cd, with_scale=True)
    except DegenerateGeometry:
        M = sum(d.R.T @ p.R for p, d in zip(src_poses, dst_poses))
        U, _, Vt = np.linalg.svd(M)
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
        R = U @ D @ Vt
        xs = (cs - cs.mean(0)) @ R.T
        xd = cd - cd.mean(0)
        den = np.sum(xs**2)
        if den <= 1e-18 * max(1.0, np.sum(cd**2)):
            raise DegenerateGeometry("bridge cameras coincide") from None
        s = float(np.sum(xs * xd) / den)
        t = cd.mean(0) - s * R @ cs.mean(0)
    if not (np.isfinite(s) and s > 0):
        raise DegenerateGeometry("non-positive merge scale")
    return s, R, t


def transfer_map(dst: SparseMap, src: SparseMap, s, R, t) -> dict:
    """Copy every frame and landmark of ``src`` into ``dst`` under the similarity.

    Returns the landmark id mapping src -> dst.
    """
    for fid, rec in src.frames.items():
        if not rec.registered or fid in dst.frames:
            continue
        new = dst.add_frame(_View(rec), rec.K)
        C = s * R @ rec.pose.center + t
        dst.register(fid, Pose.from_center(rec.pose.R @ R.T, C))
        new.kp_landmark[:] = -1
    mapping = {}
    for lid, lm in src.landmarks.items():
        obs = {f: k for f, k in lm.observations.items() if f in dst.frames and dst.frames[f].kp_landmark[k] < 0}
        if len(obs) < 2:
            continue
        mapping[lid] = dst.new_landmark(s * R @ lm.position + t, obs)
    return mapping


class _View:
    def __init__(self, rec):
        self.frame_id = rec.frame_id
        self.agent_id = rec.agent_id
        self.timestamp = rec.timestamp
        self.keypoints = rec.keypoints


def _explains(smap: SparseMap, X, observations: dict, gate_px: float) -> bool:
    for fid, kp in observations.items():
        rec = smap.frames[fid]
        uv, z = project_points(X[None], rec.pose, rec.K)
        if not z[0] > 0 or np.linalg.norm(uv[0] - rec.keypoints[kp]) > gate_px:
            return False
    return True


def fuse_mutual(smap: SparseMap, a: int, b: int, gate_px: float) -> bool:
    """Fuse two landmarks when each position reprojects into the other's observations."""
    if a == b or a not in smap.landmarks or b not in smap.landmarks:
        return False
    la, lb = smap.landmarks[a], smap.landmarks[b]
    if set(la.observations) & set(lb.observations):
        return False
    if not (_explains(smap, la.position, lb.observations, gate_px)
            and _explains(smap, lb.position, la.observations, gate_px)):
        return False
    keep, drop = (a, b) if len(la.observations) >= len(lb.observations) else (b, a)
    smap.merge_landmarks(keep, drop)
    return True


def link_bridge(smap: SparseMap, fid: int, kps, lids) -> int:
    """Attach a bridge frame's verified 2D-3D inliers as observations, forcing fusion."""
    rec = smap.frames[fid]
    linked = 0
    for kp, lid in zip(kps, lids):
        kp, lid = int(kp), int(lid)
        if lid not in smap.landmarks:
            continue
        cur = int(rec.kp_landmark[kp])
        if cur == lid:
            continue
        if cur < 0:
            if fid not in smap.landmarks[lid].observations:
                smap.add_observation(lid, fid, kp)
                linked += 1
            continue
        if set(smap.landmarks[cur].observations) & set(smap.landmarks[lid].observations):
            continue
        smap.merge_landmarks(lid, cur)
        linked += 1
    return linked


def ransac_similarity_3d(src, dst, check, rng, iters: int = 200, min_inliers: int = 15):
    """Robust 3D-3D similarity; ``check(s, R, t)`` returns an inlier mask over the pairs."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = len(src)
    if n < max(3, min_inliers):
        raise DegenerateGeometry("too few 3D-3D correspondences")
    best = None
    for _ in range(iters):
        idx = rng.choice(n, 3, replace=False)
        try:
            s, R, t = umeyama_align(src[idx], dst[idx])
        except DegenerateGeometry:
            continue
        mask = check(s, R, t)
        if best is None or mask.sum() > best.sum():
            best = mask
            if best.mean() > 0.9:
                break
    if best is None or best.sum() < min_inliers:
        raise DegenerateGeometry("no consistent 3D-3D similarity")
    for _ in range(3):
        s, R, t = umeyama_align(src[best], dst[best])
        mask = check(s, R, t)
        if mask.sum() < min_inliers or np.array_equal(mask, best):
            break
        best = mask
    return s, R, t, best
