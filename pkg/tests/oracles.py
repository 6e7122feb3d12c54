"""Independent reference computations the tests compare the package against.

Each oracle takes a different route from the code under test: generic
least-squares instead of closed forms, graph search instead of incremental
mapping, raw visibility counting instead of tracking.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.transform import Rotation

from collabmap.geometry import estimate_relative_pose, project_points
from collabmap.errors import DegenerateGeometry


# -- similarity alignment ---------------------------------------------------------------


def brute_force_similarity(src, dst, starts: int = 8, seed: int = 0):
    """Least-squares (s, R, t) by generic optimization from several random starts."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    rng = np.random.default_rng(seed)

    def resid(p):
        s = np.exp(p[0])
        R = Rotation.from_rotvec(p[1:4]).as_matrix()
        return (s * src @ R.T + p[4:7] - dst).ravel()

    best = None
    for k in range(starts):
        rv = Rotation.random(random_state=int(rng.integers(1 << 31))).as_rotvec() if k else np.zeros(3)
        x0 = np.concatenate([[0.0], rv, dst.mean(0) - src.mean(0)])
        sol = least_squares(resid, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
        if best is None or sol.cost < best.cost:
            best = sol
    p = best.x
    return float(np.exp(p[0])), Rotation.from_rotvec(p[1:4]).as_matrix(), p[4:7]


def aligned_rmse_expectation(n: int, sigma: float) -> float:
    """Expected residual RMSE after a 7-parameter fit to n points with isotropic noise."""
    return sigma * np.sqrt((3 * n - 7) / n)


# -- match-graph connectivity -----------------------------------------------------------


def verified_components(views: dict, match_fn, K, min_inliers: int = 15, theta_min_deg: float = 0.0,
                        seed: int = 0) -> list:
    """Connected components (size >= 2) of the graph of geometrically verified frame pairs."""
    ids = sorted(views)
    index = {f: i for i, f in enumerate(ids)}
    rng = np.random.default_rng(seed)
    rows, cols = [], []
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            pairs = np.asarray(match_fn(a, b)).reshape(-1, 2)
            if len(pairs) < min_inliers:
                continue
            try:
                estimate_relative_pose(views[a].keypoints[pairs[:, 0]], views[b].keypoints[pairs[:, 1]], K, K,
                                       rng=rng, theta_min_deg=theta_min_deg, min_inliers=min_inliers)
            except DegenerateGeometry:
                continue
            rows.append(index[a])
            cols.append(index[b])
    n = len(ids)
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    comps = {}
    for f, lab in zip(ids, labels):
        comps.setdefault(lab, set()).add(f)
    return sorted((c for c in comps.values() if len(c) >= 2), key=min)


# -- tracking loss ----------------------------------------------------------------------


def visibility_loss_frame(world, plan, K, frame_rate: float = 30.0, T_lost: int = 20,
                          parallax_deg: float = 0.5):
    """Index of the first frame at or after the first yaw maneuver that sees fewer than
    ``T_lost`` of the landmarks a tracker could have mapped before the maneuver.

    A landmark counts as mapped when it was visible in at least two pre-maneuver
    frames whose rays (first and last sighting) differ by ``parallax_deg``.
    """
    times = plan.frame_times(frame_rate)
    poses = [plan.pose(t) for t in times]
    L = world.landmarks
    vis = np.zeros((len(poses), len(L)), dtype=bool)
    for i, p in enumerate(poses):
        uv, z = project_points(L, p, K)
        vis[i] = (z > 0) & K.in_bounds(uv)
    t0 = min(m.time for m in plan.yaw_maneuvers) + plan.start_time
    pre = times < t0
    V = vis[pre]
    C = np.array([p.center for p in poses])
    first = np.argmax(V, 0)
    last = pre.sum() - 1 - np.argmax(V[::-1], 0)
    a, b = L - C[first], L - C[last]
    cosang = np.sum(a * b, 1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    mapped = (V.sum(0) >= 2) & (np.degrees(np.arccos(np.clip(cosang, -1, 1))) >= parallax_deg)
    counts = (vis & mapped).sum(1)
    lost = np.flatnonzero((times >= t0) & (counts < T_lost))
    return (int(lost[0]) if len(lost) else None), counts


# -- bundle adjustment ------------------------------------------------------------------


def dense_lm_cost(prob, max_nfev: int = 200) -> float:
    """Final robust cost of the same problem solved by scipy's dense LM with numeric Jacobians.

    The Huber cost is rewritten as a plain sum of squares, one residual pair per
    observation scaled so its squared norm equals the Huber value. Every camera
    that the package leaves free is free here too (rotation vector + translation);
    the gauge is left to the damping.
    """
    free = np.flatnonzero(prob.kind > 0)
    R0, t0, X0 = prob.R.copy(), prob.t.copy(), prob.X.copy()
    nc = 6 * len(free)
    delta = prob.delta
    w = prob.w_obs

    def unpack(p):
        R, t = R0.copy(), t0.copy()
        for k, i in enumerate(free):
            R[i] = Rotation.from_rotvec(p[6 * k:6 * k + 3]).as_matrix() @ R0[i]
            t[i] = t0[i] + p[6 * k + 3:6 * k + 6]
        return R, t, X0 + p[nc:].reshape(-1, 3)

    def resid(p):
        R, t, X = unpack(p)
        Xc = np.einsum("nij,nj->ni", R[prob.obs_cam], X[prob.obs_pt]) + t[prob.obs_cam]
        u = prob.fx[prob.obs_cam] * Xc[:, 0] / Xc[:, 2] + prob.cx[prob.obs_cam]
        v = prob.fy[prob.obs_cam] * Xc[:, 1] / Xc[:, 2] + prob.cy[prob.obs_cam]
        d = np.stack([u, v], 1) - prob.uv
        e = np.linalg.norm(d, axis=1)
        rho = np.where(e <= delta, e**2, 2 * delta * e - delta**2)
        scale = np.sqrt(w * rho) / np.maximum(e, 1e-300)
        return (d * scale[:, None]).ravel()

    sol = least_squares(resid, np.zeros(nc + X0.size), method="lm", max_nfev=max_nfev * (nc + X0.size),
                        xtol=1e-12, ftol=1e-12)
    return float(2 * sol.cost)


def dense_lm(prob, max_iterations: int = 100, h: float = 1e-6, tol: float = 1e-12) -> float:
    """Final robust cost from a plain dense Levenberg-Marquardt on the same problem.

    Runs without a Schur complement or an analytic Jacobian. The Jacobian comes
    from central differences with column grouping: every residual depends on
    one camera and one point, so coordinate k of all free cameras (or of all
    points) can be perturbed together. The step solves the full damped normal
    equations over cameras and points at once. Every free camera gets six
    parameters; the leftover gauge freedom is absorbed by the damping.
    """
    free = np.flatnonzero(prob.kind > 0)
    slot = np.full(len(prob.kind), -1)
    slot[free] = np.arange(len(free))
    nc, npt = 6 * len(free), prob.X.size
    delta, w = prob.delta, prob.w_obs
    cam_of_obs = slot[prob.obs_cam]
    R, t, X = prob.R.copy(), prob.t.copy(), prob.X.copy()

    def resid(R, t, X):
        Xc = np.einsum("nij,nj->ni", R[prob.obs_cam], X[prob.obs_pt]) + t[prob.obs_cam]
        u = prob.fx[prob.obs_cam] * Xc[:, 0] / Xc[:, 2] + prob.cx[prob.obs_cam]
        v = prob.fy[prob.obs_cam] * Xc[:, 1] / Xc[:, 2] + prob.cy[prob.obs_cam]
        d = np.stack([u, v], 1) - prob.uv
        e = np.linalg.norm(d, axis=1)
        rho = np.where(e <= delta, e**2, 2 * delta * e - delta**2)
        return d * (np.sqrt(w * rho) / np.maximum(e, 1e-300))[:, None]

    def moved(R, t, X, cam_step, pt_step):
        R2, t2 = R.copy(), t.copy()
        for k, i in enumerate(free):
            R2[i] = Rotation.from_rotvec(cam_step[k, :3]).as_matrix() @ R[i]
            t2[i] = t[i] + cam_step[k, 3:]
        return R2, t2, X + pt_step

    m = len(prob.obs_cam)
    rows = np.arange(m)
    cost = float(np.sum(resid(R, t, X) ** 2))
    lam = 1e-4
    for _ in range(max_iterations):
        r0 = resid(R, t, X).ravel()
        J = np.zeros((2 * m, nc + npt))
        for k in range(6):
            step = np.zeros((len(free), 6))
            step[:, k] = h
            rp = resid(*moved(R, t, X, step, 0.0))
            rm = resid(*moved(R, t, X, -step, 0.0))
            d = (rp - rm) / (2 * h)
            has = cam_of_obs >= 0
            cols = 6 * cam_of_obs[has] + k
            J[2 * rows[has], cols] = d[has, 0]
            J[2 * rows[has] + 1, cols] = d[has, 1]
        for k in range(3):
            step = np.zeros_like(X)
            step[:, k] = h
            d = (resid(R, t, X + step) - resid(R, t, X - step)) / (2 * h)
            cols = nc + 3 * prob.obs_pt + k
            J[2 * rows, cols] = d[:, 0]
            J[2 * rows + 1, cols] = d[:, 1]
        H = J.T @ J
        g = J.T @ r0
        improved = False
        for _ in range(20):
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            dx = -np.linalg.solve(A, g)
            cand = moved(R, t, X, dx[:nc].reshape(-1, 6), dx[nc:].reshape(-1, 3))
            c = float(np.sum(resid(*cand) ** 2))
            if np.isfinite(c) and c <= cost:
                improved = cost - c > tol * max(cost, 1.0)
                R, t, X = cand
                cost = c
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if not improved:
            break
    return cost
