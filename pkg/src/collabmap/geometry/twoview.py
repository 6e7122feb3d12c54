"""Triangulation and calibrated relative-pose estimation."""

from __future__ import annotations

import numpy as np

from scipy.spatial.transform import Rotation

from ..errors import DegenerateGeometry
from .camera import CameraIntrinsics, Pose, skew

THETA_TRI_MIN_DEG = 0.5
RANSAC_MAX_ITERS = 1024
RANSAC_CONFIDENCE = 0.999
MIN_RELPOSE_INLIERS = 15
SAMPSON_THRESHOLD_PX = 2.0

_RANSAC_BATCH = 64


def ray_angles(centers_a, centers_b, points) -> np.ndarray:
    """Angle (radians) subtended at each point by the two camera centers."""
    da = np.asarray(centers_a, dtype=float) - points
    db = np.asarray(centers_b, dtype=float) - points
    c = np.sum(da * db, axis=-1) / (np.linalg.norm(da, axis=-1) * np.linalg.norm(db, axis=-1) + 1e-300)
    return np.arccos(np.clip(c, -1.0, 1.0))


def _projection_matrix(pose: Pose) -> np.ndarray:
    return np.hstack([pose.R, pose.translation[:, None]])


def _reproj_jacobian(X, pose: Pose, K: CameraIntrinsics):
    Xc = pose.transform(X)
    x, y, z = Xc[..., 0], Xc[..., 1], Xc[..., 2]
    uv = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=-1)
    dproj = np.zeros(Xc.shape[:-1] + (2, 3))
    dproj[..., 0, 0] = K.fx / z
    dproj[..., 0, 2] = -K.fx * x / z**2
    dproj[..., 1, 1] = K.fy / z
    dproj[..., 1, 2] = -K.fy * y / z**2
    return uv, dproj @ pose.R, z


def triangulate(observations, theta_min_deg: float = THETA_TRI_MIN_DEG) -> np.ndarray:
    """Triangulate one point from ``[(pose, K, pixel), ...]``.

    Linear DLT followed by a single Gauss-Newton step on pixel reprojection
    error. Raises ``DegenerateGeometry`` when the widest ray pair subtends less
    than ``theta_min_deg`` or the point ends up behind any camera.
    """
    if len(observations) < 2:
        raise DegenerateGeometry("need at least two observations")
    rows = []
    for pose, K, px in observations:
        x, y = K.normalize(px)
        P = _projection_matrix(pose)
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
    A = np.asarray(rows)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12:
        raise DegenerateGeometry("point at infinity")
    X = Xh[:3] / Xh[3]
    if not np.all(np.isfinite(X)):
        raise DegenerateGeometry("non-finite point")

    J = []
    r = []
    for pose, K, px in observations:
        uv, dX, z = _reproj_jacobian(X, pose, K)
        if z <= 0:
            raise DegenerateGeometry("point behind camera")
        r.append(uv - np.asarray(px, dtype=float))
        J.append(dX)
    J = np.vstack(J)
    r = np.concatenate(r)
    step, *_ = np.linalg.lstsq(J, -r, rcond=None)
    X = X + step

    centers = np.array([pose.center for pose, _, _ in observations])
    depths = np.array([pose.transform(X)[2] for pose, _, _ in observations])
    if np.any(depths <= 0):
        raise DegenerateGeometry("point behind camera")
    n = len(centers)
    ia, ib = np.triu_indices(n, 1)
    max_angle = ray_angles(centers[ia], centers[ib], X).max()
    if max_angle < np.radians(theta_min_deg):
        raise DegenerateGeometry("insufficient parallax")
    return X


def triangulate_pairs(pose_a: Pose, K_a: CameraIntrinsics, uv_a, pose_b: Pose, K_b: CameraIntrinsics, uv_b):
    """Vectorized two-view DLT plus one Gauss-Newton step.

    Returns ``(points, angles, depth_a, depth_b)``; callers apply their own
    parallax and cheirality gates.
    """
    uv_a = np.asarray(uv_a, dtype=float).reshape(-1, 2)
    uv_b = np.asarray(uv_b, dtype=float).reshape(-1, 2)
    n = len(uv_a)
    if n == 0:
        empty = np.zeros(0)
        return np.zeros((0, 3)), empty, empty, empty
    xa = K_a.normalize(uv_a)
    xb = K_b.normalize(uv_b)
    Pa = _projection_matrix(pose_a)
    Pb = _projection_matrix(pose_b)
    A = np.empty((n, 4, 4))
    A[:, 0] = xa[:, :1] * Pa[2] - Pa[0]
    A[:, 1] = xa[:, 1:] * Pa[2] - Pa[1]
    A[:, 2] = xb[:, :1] * Pb[2] - Pb[0]
    A[:, 3] = xb[:, 1:] * Pb[2] - Pb[1]
    # row scaling keeps the SVD well conditioned
    A /= np.linalg.norm(A, axis=2, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = Xh[:, :3] / Xh[:, 3:]

    uva, Ja, _ = _reproj_jacobian(X, pose_a, K_a)
    uvb, Jb, _ = _reproj_jacobian(X, pose_b, K_b)
    r = np.concatenate([uva - uv_a, uvb - uv_b], axis=1)
    J = np.concatenate([Ja, Jb], axis=1)
    JtJ = np.einsum("nki,nkj->nij", J, J)
    Jtr = np.einsum("nki,nk->ni", J, r)
    ok = np.isfinite(JtJ).all(axis=(1, 2)) & (np.abs(np.linalg.det(JtJ)) > 1e-18)
    if ok.any():
        X[ok] -= np.linalg.solve(JtJ[ok], Jtr[ok][..., None])[..., 0]

    depth_a = pose_a.transform(X)[:, 2]
    depth_b = pose_b.transform(X)[:, 2]
    angles = ray_angles(pose_a.center, pose_b.center, X)
    bad = ~np.isfinite(X).all(axis=1)
    depth_a[bad] = -1.0
    depth_b[bad] = -1.0
    angles[bad] = 0.0
    return X, angles, depth_a, depth_b


def bearing_angles(pose_a: Pose, K_a, uv_a, pose_b: Pose, K_b, uv_b) -> np.ndarray:
    """Angle between matched viewing rays expressed in the world frame."""
    da = K_a.bearings(uv_a) @ pose_a.R
    db = K_b.bearings(uv_b) @ pose_b.R
    return np.arccos(np.clip(np.sum(da * db, axis=-1), -1.0, 1.0))


# --- essential matrix ----------------------------------------------------------------


def _hartley(x):
    c = x.mean(axis=-2, keepdims=True)
    d = np.sqrt(((x - c) ** 2).sum(axis=-1)).mean(axis=-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    T = np.zeros(x.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0, 0]
    T[..., 1, 2] = -s * c[..., 0, 1]
    T[..., 2, 2] = 1.0
    xn = (x - c) * s[..., None, None]
    return xn, T


def eight_point(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Hartley-normalized eight-point fundamental matrices.

    ``u1``/``u2`` are pixel coordinates shaped (..., n, 2), n >= 8. Returns
    rank-2 (..., 3, 3) matrices with ``u2^T F u1 = 0``.
    """
    a, Ta = _hartley(u1)
    b, Tb = _hartley(u2)
    ones = np.ones(a.shape[:-1])
    A = np.stack(
        [
            b[..., 0] * a[..., 0], b[..., 0] * a[..., 1], b[..., 0],
            b[..., 1] * a[..., 0], b[..., 1] * a[..., 1], b[..., 1],
            a[..., 0], a[..., 1], ones,
        ],
        axis=-1,
    )
    _, _, Vt = np.linalg.svd(A)
    Fn = Vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    U, S, Vt = np.linalg.svd(Fn)
    S[..., 2] = 0.0
    Fn = U @ (S[..., :, None] * Vt)
    return np.swapaxes(Tb, -1, -2) @ Fn @ Ta


def essential_from_fundamental(F, K1: CameraIntrinsics, K2: CameraIntrinsics):
    """Project ``K2^T F K1`` onto the essential manifold (singular values 1, 1, 0)."""
    E = K2.matrix.T @ F @ K1.matrix
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def sampson_sq(F: np.ndarray, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Squared Sampson distances for (..., 3, 3) fundamental matrices."""
    h1 = np.concatenate([u1, np.ones(u1.shape[:-1] + (1,))], axis=-1)
    h2 = np.concatenate([u2, np.ones(u2.shape[:-1] + (1,))], axis=-1)
    Fx1 = np.einsum("...ij,nj->...ni", F, h1)
    Ftx2 = np.einsum("...ji,nj->...ni", F, h2)
    num = np.einsum("nj,...nj->...n", h2, Fx1) ** 2
    den = Fx1[..., 0] ** 2 + Fx1[..., 1] ** 2 + Ftx2[..., 0] ** 2 + Ftx2[..., 1] ** 2
    return num / np.maximum(den, 1e-300)


def fundamental_from_essential(E, K1: CameraIntrinsics, K2: CameraIntrinsics):
    K1i = np.linalg.inv(K1.matrix)
    K2i = np.linalg.inv(K2.matrix)
    return K2i.T @ E @ K1i


def _ransac_iterations(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    w = inlier_ratio**sample_size
    if w <= 0:
        return np.inf
    if w >= 1:
        return 0
    return np.log(1 - confidence) / np.log(1 - w)


def ransac_fundamental(uv1, uv2, rng, threshold_px=SAMPSON_THRESHOLD_PX,
                       max_iters=RANSAC_MAX_ITERS, confidence=RANSAC_CONFIDENCE):
    """RANSAC over eight-point samples with a Sampson inlier test.

    Returns ``(F, inlier_mask)``; ``F`` is None when fewer than 8 matches exist.
    """
    uv1 = np.asarray(uv1, dtype=float)
    uv2 = np.asarray(uv2, dtype=float)
    n = len(uv1)
    if n < 8:
        return None, np.zeros(n, dtype=bool)
    thr2 = threshold_px**2

    best_F, best_mask, best_count = None, np.zeros(n, dtype=bool), -1
    needed, done = max_iters, 0
    while done < min(needed, max_iters):
        b = min(_RANSAC_BATCH, max_iters - done)
        idx = np.argsort(rng.random((b, n)), axis=1)[:, :8]
        F = eight_point(uv1[idx], uv2[idx])
        masks = sampson_sq(F, uv1, uv2) <= thr2
        counts = masks.sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count = int(counts[k])
            best_F, best_mask = F[k], masks[k]
            needed = _ransac_iterations(best_count / n, 8, confidence)
        done += b

    if best_count >= 8:
        # refit on the consensus set; keep it only if it does not lose support
        F = eight_point(uv1[best_mask], uv2[best_mask])
        mask = sampson_sq(F, uv1, uv2) <= thr2
        if mask.sum() >= best_count:
            best_F, best_mask = F, mask
    return best_F, best_mask


def _tangent_basis(t):
    t = t / np.linalg.norm(t)
    a = np.eye(3)[np.argmin(np.abs(t))]
    b1 = np.cross(t, a)
    b1 /= np.linalg.norm(b1)
    return np.stack([b1, np.cross(t, b1)], axis=1)


def refine_relative_pose(R, t, uv1, uv2, K1, K2, iters: int = 30):
    """LM on Sampson residuals over the 5-DoF (rotation, unit translation) manifold."""
    K1i = np.linalg.inv(K1.matrix)
    K2i = np.linalg.inv(K2.matrix)
    h1 = np.concatenate([uv1, np.ones((len(uv1), 1))], axis=1)
    h2 = np.concatenate([uv2, np.ones((len(uv2), 1))], axis=1)

    def residuals(R, t):
        F = K2i.T @ skew(t) @ R @ K1i
        Fx1 = h1 @ F.T
        Ftx2 = h2 @ F
        num = np.sum(h2 * Fx1, axis=1)
        den = np.sqrt(Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2)
        return num / np.maximum(den, 1e-300)

    def retract(R, t, d):
        Rn = Rotation.from_rotvec(d[:3]).as_matrix() @ R
        tn = t + _tangent_basis(t) @ d[3:]
        return Rn, tn / np.linalg.norm(tn)

    t = t / np.linalg.norm(t)
    r = residuals(R, t)
    cost = r @ r
    lam = 1e-3
    eps = 1e-7
    for _ in range(iters):
        J = np.empty((len(r), 5))
        for k in range(5):
            d = np.zeros(5)
            d[k] = eps
            Rp, tp = retract(R, t, d)
            d[k] = -eps
            Rm, tm = retract(R, t, d)
            J[:, k] = (residuals(Rp, tp) - residuals(Rm, tm)) / (2 * eps)
        H = J.T @ J
        g = J.T @ r
        accepted = False
        for _ in range(8):
            step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
            Rn, tn = retract(R, t, step)
            rn = residuals(Rn, tn)
            cn = rn @ rn
            if cn <= cost:
                rel = (cost - cn) / max(cost, 1e-300)
                R, t, r, cost = Rn, tn, rn, cn
                lam = max(lam / 10, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted or rel < 1e-10:
            break
    return R, t


def decompose_essential(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    return [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]


def estimate_relative_pose(uv1, uv2, K1: CameraIntrinsics, K2: CameraIntrinsics, rng=None,
                           theta_min_deg: float = THETA_TRI_MIN_DEG,
                           threshold_px: float = SAMPSON_THRESHOLD_PX,
                           min_inliers: int = MIN_RELPOSE_INLIERS,
                           max_iters: int = RANSAC_MAX_ITERS):
    """Pose of camera 2 relative to camera 1 (unit translation) and the inlier mask.

    Raises ``DegenerateGeometry`` for fewer than 15 inliers or when the median
    triangulation angle of the inliers is below ``theta_min_deg``.
    """
    uv1 = np.asarray(uv1, dtype=float).reshape(-1, 2)
    uv2 = np.asarray(uv2, dtype=float).reshape(-1, 2)
    if len(uv1) != len(uv2):
        raise ValueError("uv1 and uv2 must have the same length")
    if len(uv1) < 8:
        raise DegenerateGeometry("need at least 8 matches")
    if rng is None:
        rng = np.random.default_rng(0)
    F, mask = ransac_fundamental(uv1, uv2, rng, threshold_px, max_iters)
    if F is None or mask.sum() < min_inliers:
        raise DegenerateGeometry("too few epipolar inliers")
    E = essential_from_fundamental(F, K1, K2)

    ref = Pose.identity()

    def cheirality(pose, mask):
        X, ang, za, zb = triangulate_pairs(ref, K1, uv1[mask], pose, K2, uv2[mask])
        return (za > 0) & (zb > 0), ang

    best = None
    for R, t in decompose_essential(E):
        cand = Pose.from_Rt(R, t)
        front, _ = cheirality(cand, mask)
        if best is None or front.sum() > best[0]:
            best = (int(front.sum()), cand)
    pose = best[1]

    R, t = refine_relative_pose(pose.R, pose.translation, uv1[mask], uv2[mask], K1, K2)
    pose = Pose.from_Rt(R, t)
    refined = sampson_sq(fundamental_from_essential(skew(t) @ R, K1, K2), uv1, uv2) <= threshold_px**2
    if refined.sum() >= mask.sum():
        mask = refined
    front, ang = cheirality(pose, mask)
    final = mask.copy()
    final[np.flatnonzero(mask)[~front]] = False
    if final.sum() < min_inliers:
        raise DegenerateGeometry("too few inliers in front of both cameras")
    if np.median(ang[front]) < np.radians(theta_min_deg):
        raise DegenerateGeometry("insufficient parallax")
    return pose, final
