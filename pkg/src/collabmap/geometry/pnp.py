"""Perspective-n-point resection: batched P3P inside RANSAC, then LM refinement."""

from __future__ import annotations

import numpy as np

from ..errors import PnPFailed
from .camera import CameraIntrinsics, Pose, skew
from .twoview import RANSAC_CONFIDENCE, RANSAC_MAX_ITERS, _ransac_iterations

REPROJ_THRESHOLD_PX = 2.0
N_PNP_MIN = 12

_BATCH = 64


def _kabsch(A, B):
    """Batched rigid fit B ≈ R A + t for (..., n, 3) point sets."""
    ca = A.mean(axis=-2, keepdims=True)
    cb = B.mean(axis=-2, keepdims=True)
    H = np.swapaxes(A - ca, -1, -2) @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)
    t = cb[..., 0, :] - np.einsum("...ij,...j->...i", R, ca[..., 0, :])
    return R, t


def p3p(world: np.ndarray, bearings: np.ndarray):
    """Grunert's three-point solver, batched.

    ``world`` and ``bearings`` are (B, 3, 3). Returns camera-from-world
    rotations (B, 4, 3, 3), translations (B, 4, 3) and a (B, 4) validity mask
    (one slot per real root of the quartic).
    """
    P = np.asarray(world, dtype=float)
    j = np.asarray(bearings, dtype=float)
    B = P.shape[0]
    a2 = np.sum((P[:, 1] - P[:, 2]) ** 2, axis=-1)
    b2 = np.sum((P[:, 0] - P[:, 2]) ** 2, axis=-1)
    c2 = np.sum((P[:, 0] - P[:, 1]) ** 2, axis=-1)
    ca = np.sum(j[:, 1] * j[:, 2], axis=-1)
    cb = np.sum(j[:, 0] * j[:, 2], axis=-1)
    cg = np.sum(j[:, 0] * j[:, 1], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        amc = (a2 - c2) / b2
        apc = (a2 + c2) / b2
        A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca**2
        A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca**2 * cb)
        A2 = 2 * (amc**2 - 1 + 2 * amc**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2
                  - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2)
        A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - apc) * ca * cg)
        A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg**2

        coeffs = np.stack([A3, A2, A1, A0], axis=-1) / A4[:, None]
        finite = np.isfinite(coeffs).all(axis=1)
        coeffs[~finite] = 0.0
        comp = np.zeros((B, 4, 4))
        comp[:, 0, :] = -coeffs
        comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
        roots = np.linalg.eigvals(comp)
        real = np.abs(roots.imag) < 1e-6 * np.maximum(1.0, np.abs(roots.real))
        v = roots.real
        u = (((-1 + amc)[:, None] * v**2 - 2 * (amc * cb)[:, None] * v + (1 + amc)[:, None])
             / (2 * (cg[:, None] - v * ca[:, None])))
        s1sq = c2[:, None] / (1 + u**2 - 2 * u * cg[:, None])
        valid = real & finite[:, None] & (s1sq > 0) & (v > 0) & (u > 0) & np.isfinite(u)
        s1 = np.sqrt(np.where(valid, s1sq, 1.0))
    dist = np.stack([s1, u * s1, v * s1], axis=-1)
    dist[~valid] = 1.0
    cam = dist[..., None] * j[:, None, :, :]
    R, t = _kabsch(np.broadcast_to(P[:, None], cam.shape), cam)
    return R, t, valid


def _reprojection_errors(R, t, X, uv, K: CameraIntrinsics):
    Xc = np.einsum("...ij,nj->...ni", R, X) + t[..., None, :]
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[..., 0] / z + K.cx
        v = K.fy * Xc[..., 1] / z + K.cy
        err = np.hypot(u - uv[:, 0], v - uv[:, 1])
    err = np.where(z > 0, err, np.inf)
    return err


def refine_pose(pose: Pose, X, uv, K: CameraIntrinsics, iters: int = 20) -> Pose:
    """Levenberg-Marquardt on summed squared reprojection error (6-DoF)."""
    R, t = pose.R.copy(), pose.translation.copy()

    def residuals(R, t):
        Xc = X @ R.T + t
        z = Xc[:, 2]
        pred = np.stack([K.fx * Xc[:, 0] / z + K.cx, K.fy * Xc[:, 1] / z + K.cy], axis=1)
        return (pred - uv).ravel(), Xc

    r, Xc = residuals(R, t)
    cost = r @ r
    lam = 1e-3
    for _ in range(iters):
        x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        dproj = np.zeros((len(X), 2, 3))
        dproj[:, 0, 0] = K.fx / z
        dproj[:, 0, 2] = -K.fx * x / z**2
        dproj[:, 1, 1] = K.fy / z
        dproj[:, 1, 2] = -K.fy * y / z**2
        # left-multiplied rotation increment: d(Xc)/dw = -[R X]_x
        J = np.concatenate([dproj @ -skew(X @ R.T), dproj], axis=2).reshape(-1, 6)
        H = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(10):
            step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
            dR = _rotvec_to_matrix(step[:3])
            R_new, t_new = dR @ R, t + step[3:]
            r_new, Xc_new = residuals(R_new, t_new)
            c_new = r_new @ r_new
            if np.isfinite(c_new) and c_new <= cost:
                R, t, r, Xc = R_new, t_new, r_new, Xc_new
                rel = (cost - c_new) / max(cost, 1e-300)
                cost = c_new
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or rel < 1e-12 or cost < 1e-20:
            break
    return Pose.from_Rt(R, t)


def _rotvec_to_matrix(w):
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = skew(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def solve_pnp(points3d, pixels, K: CameraIntrinsics, rng=None,
              threshold_px: float = REPROJ_THRESHOLD_PX, min_inliers: int = N_PNP_MIN,
              max_iters: int = RANSAC_MAX_ITERS, confidence: float = RANSAC_CONFIDENCE):
    """Camera pose from 2D-3D correspondences.

    Returns ``(pose, inlier_mask)``; raises ``PnPFailed`` with fewer than four
    correspondences or fewer than ``min_inliers`` consensus points.
    """
    X = np.asarray(points3d, dtype=float).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = len(X)
    if n < 4:
        raise PnPFailed("need at least four correspondences")
    if rng is None:
        rng = np.random.default_rng(0)
    bear = K.bearings(uv)

    best_count, best_R, best_t = -1, None, None
    needed, done = max_iters, 0
    while done < min(needed, max_iters):
        b = min(_BATCH, max_iters - done)
        idx = np.argsort(rng.random((b, n)), axis=1)[:, :3]
        R, t, valid = p3p(X[idx], bear[idx])
        err = _reprojection_errors(R, t, X, uv, K)
        counts = np.where(valid, (err <= threshold_px).sum(axis=-1), -1)
        k = np.unravel_index(int(np.argmax(counts)), counts.shape)
        if counts[k] > best_count:
            best_count = int(counts[k])
            best_R, best_t = R[k], t[k]
            needed = _ransac_iterations(best_count / n, 3, confidence)
        done += b

    if best_count < max(min_inliers, 4):
        raise PnPFailed(f"only {max(best_count, 0)} inliers")

    pose = Pose.from_Rt(best_R, best_t)
    mask = _reprojection_errors(pose.R, pose.translation, X, uv, K) <= threshold_px
    for _ in range(3):
        pose = refine_pose(pose, X[mask], uv[mask], K)
        new_mask = _reprojection_errors(pose.R, pose.translation, X, uv, K) <= threshold_px
        if np.array_equal(new_mask, mask) or new_mask.sum() < 4:
            break
        mask = new_mask
    mask = _reprojection_errors(pose.R, pose.translation, X, uv, K) <= threshold_px
    if mask.sum() < max(min_inliers, 4):
        raise PnPFailed(f"only {int(mask.sum())} inliers after refinement")
    return pose, mask
