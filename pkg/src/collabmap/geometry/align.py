"""Least-squares similarity alignment of point sets (Umeyama)."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateGeometry

COLLINEAR_RTOL = 1e-12


def umeyama_align(src, dst, with_scale: bool = True):
    """Closed-form ``(s, R, t)`` minimizing sum ||dst_i - (s R src_i + t)||^2.

    Raises ``DegenerateGeometry`` when the source points are collinear, i.e.
    the second singular value of the centred scatter is below 1e-12 of the
    first (rotation about the line is then unconstrained).
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have equal length")
    n = len(src)
    if n < 3:
        raise DegenerateGeometry("need at least three points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d

    spread = np.linalg.svd(xs, compute_uv=False)
    if spread[0] == 0 or spread[1] < COLLINEAR_RTOL * spread[0]:
        raise DegenerateGeometry("source points are collinear")

    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = np.sum(xs**2) / n
        s = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def apply_similarity(s, R, t, points):
    return s * np.asarray(points, dtype=float) @ np.asarray(R).T + t


def alignment_residual(s, R, t, src, dst) -> float:
    """Sum of squared residuals after applying the similarity."""
    d = np.asarray(dst, dtype=float) - apply_similarity(s, R, t, src)
    return float(np.sum(d**2))
