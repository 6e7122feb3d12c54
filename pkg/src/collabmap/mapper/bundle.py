"""Sparse Levenberg-Marquardt bundle adjustment with Schur elimination of points.

Cost: sum over observations of ``w_f * rho(e)`` where ``e`` is the pixel
reprojection error norm and ``rho`` is Huber on that norm
(``e^2`` below ``delta``, ``2 delta e - delta^2`` above). Each LM step solves
the IRLS-weighted normal equations; steps are accepted only when the true
robust cost does not increase.

Gauge: the first gauge frame is held fixed. The second keeps its rotation
free but its camera center moves on the sphere around the first one, which
fixes the scale (with the first frame at the identity this is exactly the
norm of its translation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from ..geometry import Pose, skew
from ..geometry.pnp import _rotvec_to_matrix
from ..geometry.twoview import _tangent_basis


@dataclass
class BAOptions:
    max_iterations: int = 50
    huber_delta: float = 2.0
    weight_mode: str = "uniform"  # or "similarity"
    convergence_tol: float = 1e-10
    initial_lambda: float = 1e-4

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.weight_mode not in ("uniform", "similarity"):
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")


@dataclass
class BAReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    costs: list = field(default_factory=list)  # accepted-step cost sequence
    n_frames: int = 0
    n_landmarks: int = 0
    n_observations: int = 0

    @property
    def not_converged(self) -> bool:
        return not self.converged


def huber(e, delta):
    return np.where(e <= delta, e**2, 2 * delta * e - delta**2)


def huber_weight(e, delta):
    with np.errstate(divide="ignore"):
        return np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))


def normalize_weights(weights: dict | None, frame_ids) -> np.ndarray:
    if not weights:
        return np.ones(len(frame_ids))
    w = np.array([float(weights.get(f, 1.0)) for f in frame_ids])
    w = np.clip(w, 0.0, 1.0)
    m = w.mean()
    return w / m if m > 0 else np.ones(len(frame_ids))


def similarity_weights(smap, score) -> dict:
    """Mean pairwise ``score(f, g)`` of every registered frame to its covisible frames."""
    out = {}
    for fid in smap.registered_ids:
        cov = smap.covisibility(fid)
        vals = [score(fid, g) for g in sorted(cov)]
        out[fid] = float(np.mean(vals)) if vals else 1.0
    return out


class BundleProblem:
    """Arrays for one adjustment problem extracted from a :class:`SparseMap`.

    ``free_frames`` limits which poses move (local BA); landmarks observed by
    any free frame move; other frames observing them are held fixed.
    """

    def __init__(self, smap, free_frames=None, weights: dict | None = None, delta: float = 2.0):
        self.smap = smap
        self.delta = delta
        registered = set(smap.registered_ids)
        free = registered if free_frames is None else set(free_frames) & registered
        if free_frames is None:
            lids = sorted(smap.landmarks)
        else:
            lids = sorted({int(l) for f in free for l in smap.frame_landmarks(f)[1]})
        self.landmark_ids = lids
        obs_frames, obs_kp = [], []
        obs_pt, obs_f = [], []
        for j, lid in enumerate(lids):
            for fid, kp in smap.landmarks[lid].observations.items():
                obs_pt.append(j)
                obs_f.append(fid)
                obs_kp.append(kp)
        fids = sorted(set(obs_f) | (free & registered))
        self.frame_ids = fids
        fidx = {f: i for i, f in enumerate(fids)}
        self.obs_cam = np.array([fidx[f] for f in obs_f], dtype=np.int64)
        self.obs_pt = np.array(obs_pt, dtype=np.int64)
        self.uv = np.array([smap.frames[f].keypoints[k] for f, k in zip(obs_f, obs_kp)]).reshape(-1, 2)
        Ks = [smap.frames[f].K for f in fids]
        self.fx = np.array([k.fx for k in Ks])
        self.fy = np.array([k.fy for k in Ks])
        self.cx = np.array([k.cx for k in Ks])
        self.cy = np.array([k.cy for k in Ks])
        self.R = np.array([smap.frames[f].pose.R for f in fids]).reshape(-1, 3, 3)
        self.t = np.array([smap.frames[f].pose.translation for f in fids]).reshape(-1, 3)
        self.X = smap.positions(lids)
        self.w_frame = normalize_weights(weights, fids)
        self.w_obs = self.w_frame[self.obs_cam] if len(self.obs_cam) else np.zeros(0)

        # camera parameter layout, -1 marks an unused slot
        g0, g1 = smap.fixed_gauge if smap.fixed_gauge else (None, None)
        self.g0_center = smap.frames[g0].pose.center.copy() if g0 in smap.frames and smap.frames[g0].registered else None
        cols = np.full((len(fids), 6), -1, dtype=np.int64)
        self.kind = np.zeros(len(fids), dtype=np.int64)  # 0 fixed, 1 full, 2 sphere
        n = 0
        for i, f in enumerate(fids):
            if f not in free or f == g0:
                continue
            if f == g1 and self.g0_center is not None:
                self.kind[i] = 2
                cols[i, :5] = np.arange(n, n + 5)
                n += 5
            else:
                self.kind[i] = 1
                cols[i] = np.arange(n, n + 6)
                n += 6
        self.cam_cols = cols
        self.n_cam_params = n
        self.n_params = n + 3 * len(lids)

    # -- evaluation ---------------------------------------------------------------------
    def _project(self, R, t, X):
        Xc = np.einsum("nij,nj->ni", R[self.obs_cam], X[self.obs_pt]) + t[self.obs_cam]
        z = Xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx[self.obs_cam] * Xc[:, 0] / z + self.cx[self.obs_cam]
            v = self.fy[self.obs_cam] * Xc[:, 1] / z + self.cy[self.obs_cam]
        return np.stack([u, v], axis=1), Xc

    def errors(self, R=None, t=None, X=None):
        R = self.R if R is None else R
        t = self.t if t is None else t
        X = self.X if X is None else X
        pred, Xc = self._project(R, t, X)
        e = np.linalg.norm(pred - self.uv, axis=1)
        e[~(Xc[:, 2] > 0)] = np.inf
        return e

    def cost(self, R=None, t=None, X=None) -> float:
        e = self.errors(R, t, X)
        return float(np.sum(self.w_obs * huber(e, self.delta)))

    def retract(self, delta):
        """New (R, t, X) after applying a parameter increment."""
        delta = np.asarray(delta, dtype=float)
        R, t = self.R.copy(), self.t.copy()
        for i in np.flatnonzero(self.kind):
            c = self.cam_cols[i]
            d = delta[c[c >= 0]]
            dR = _rotvec_to_matrix(d[:3])
            if self.kind[i] == 1:
                R[i] = dR @ R[i]
                t[i] = t[i] + d[3:6]
            else:
                C = -self.R[i].T @ self.t[i]
                off = C - self.g0_center
                b = np.linalg.norm(off)
                B = _tangent_basis(off)
                off_new = off + B @ d[3:5]
                C_new = self.g0_center + b * off_new / np.linalg.norm(off_new)
                R[i] = dR @ R[i]
                t[i] = -R[i] @ C_new
        X = self.X + delta[self.n_cam_params:].reshape(-1, 3)
        return R, t, X

    def residuals(self, delta=None) -> np.ndarray:
        """Weighted raw residuals ``sqrt(w_f) * (proj - uv)``, flattened."""
        if delta is None:
            R, t, X = self.R, self.t, self.X
        else:
            R, t, X = self.retract(delta)
        pred, _ = self._project(R, t, X)
        return (np.sqrt(self.w_obs)[:, None] * (pred - self.uv)).ravel()

    def blocks(self):
        """Per-observation camera (n, 2, 6) and point (n, 2, 3) Jacobian blocks plus residuals."""
        n = len(self.obs_cam)
        pred, Xc = self._project(self.R, self.t, self.X)
        x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        fx, fy = self.fx[self.obs_cam], self.fy[self.obs_cam]
        dproj = np.zeros((n, 2, 3))
        dproj[:, 0, 0] = fx / z
        dproj[:, 0, 2] = -fx * x / z**2
        dproj[:, 1, 1] = fy / z
        dproj[:, 1, 2] = -fy * y / z**2
        J_pt = dproj @ self.R[self.obs_cam]
        RX = Xc - self.t[self.obs_cam]
        kind = self.kind[self.obs_cam]
        J_cam = np.zeros((n, 2, 6))
        full = kind == 1
        J_cam[full, :, :3] = dproj[full] @ -skew(RX[full])
        J_cam[full, :, 3:] = dproj[full]
        sph = np.flatnonzero(kind == 2)
        if len(sph):
            i = self.obs_cam[sph[0]]
            C = -self.R[i].T @ self.t[i]
            B = _tangent_basis(C - self.g0_center)
            J_cam[sph, :, :3] = dproj[sph] @ -skew(Xc[sph])
            J_cam[sph, :, 3:5] = dproj[sph] @ (-self.R[i] @ B)
        sw = np.sqrt(self.w_obs)
        return J_cam * sw[:, None, None], J_pt * sw[:, None, None], (pred - self.uv) * sw[:, None]

    def assemble(self, J_cam, J_pt):
        n = len(self.obs_cam)
        rows = np.arange(2 * n).reshape(n, 2)
        cols = self.cam_cols[self.obs_cam]
        rr = np.broadcast_to(rows[:, :, None], (n, 2, 6))
        cc = np.broadcast_to(cols[:, None, :], (n, 2, 6))
        keep = cc >= 0
        pr = np.broadcast_to(rows[:, :, None], (n, 2, 3))
        pc = np.broadcast_to(self.n_cam_params + 3 * self.obs_pt[:, None, None] + np.arange(3), (n, 2, 3))
        data = np.concatenate([J_cam[keep], J_pt.ravel()])
        r_idx = np.concatenate([rr[keep], pr.ravel()])
        c_idx = np.concatenate([cc[keep], pc.ravel()])
        return sp.csr_matrix((data, (r_idx, c_idx)), shape=(2 * n, self.n_params))

    def jacobian(self):
        """Sparse Jacobian of :meth:`residuals` at zero increment."""
        J_cam, J_pt, _ = self.blocks()
        return self.assemble(J_cam, J_pt)

    def write_back(self):
        for i, f in enumerate(self.frame_ids):
            if self.kind[i]:
                self.smap.frames[f].pose = Pose.from_Rt(self.R[i], self.t[i])
        for j, lid in enumerate(self.landmark_ids):
            self.smap.landmarks[lid].position = self.X[j].copy()


def _irls_system(prob: BundleProblem):
    """Huber-reweighted Jacobian, residuals and 3x3 point blocks of J^T J."""
    w = np.sqrt(huber_weight(prob.errors(), prob.delta))
    J_cam, J_pt, r = prob.blocks()
    J_cam *= w[:, None, None]
    J_pt *= w[:, None, None]
    r = r * w[:, None]
    C = np.zeros((len(prob.landmark_ids), 3, 3))
    np.add.at(C, prob.obs_pt, np.einsum("nki,nkj->nij", J_pt, J_pt))
    return prob.assemble(J_cam, J_pt), r.ravel(), C


def _block_diag(blocks):
    n = len(blocks)
    return sp.bsr_matrix((blocks, np.arange(n), np.arange(n + 1)), shape=(3 * n, 3 * n)).tocsr()


def normal_blocks(J, r, n_cam: int):
    """Camera block B, coupling E and gradients of the undamped normal equations."""
    Jc = J[:, :n_cam]
    Jp = J[:, n_cam:]
    B = (Jc.T @ Jc).toarray()
    E = (Jc.T @ Jp).tocsr()
    return B, E, Jc.T @ r, Jp.T @ r


def _solve_schur(B, E, C, g_c, g_p, lam: float):
    """Damped step with the 3x3 point blocks eliminated (Schur complement)."""
    n_cam = len(g_c)
    C = C.copy()
    d3 = np.arange(3)
    C[:, d3, d3] *= 1 + lam
    C[:, d3, d3] += 1e-12
    Cinv = _block_diag(np.linalg.inv(C))
    if n_cam == 0:
        return np.zeros(0), -(Cinv @ g_p)
    S = B.copy()
    S[np.diag_indices(n_cam)] *= 1 + lam
    S[np.diag_indices(n_cam)] += 1e-12
    ECinv = E @ Cinv
    S -= (ECinv @ E.T).toarray()
    rhs = -g_c + ECinv @ g_p
    try:
        dc = scipy.linalg.solve(S, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        dc = np.linalg.lstsq(S, rhs, rcond=None)[0]
    dp = -(Cinv @ (g_p + E.T @ dc))
    return dc, dp


def solve_step_dense(J, r, lam: float):
    """Reference damped step without the Schur complement (used by tests)."""
    Jd = J.toarray()
    H = Jd.T @ Jd
    H[np.diag_indices_from(H)] *= 1 + lam
    H[np.diag_indices_from(H)] += 1e-12
    return np.linalg.solve(H, -(Jd.T @ r))


def adjust(prob: BundleProblem, opts: BAOptions) -> BAReport:
    cost = prob.cost()
    report = BAReport(cost, cost, 0, False, [cost], len(prob.frame_ids), len(prob.landmark_ids), len(prob.obs_cam))
    if len(prob.obs_cam) == 0 or prob.n_params == 0:
        report.converged = True
        report.iterations = 1
        return report
    lam = opts.initial_lambda
    # residuals at this level are round-off; nothing left to fit
    floor = 1e-20 * len(prob.obs_cam)
    for it in range(1, opts.max_iterations + 1):
        report.iterations = it
        if cost <= floor:
            report.converged = True
            break
        J, r, C = _irls_system(prob)
        B, E, g_c, g_p = normal_blocks(J, r, prob.n_cam_params)
        accepted = False
        for _ in range(8):
            dc, dp = _solve_schur(B, E, C, g_c, g_p, lam)
            step = np.concatenate([dc, dp])
            if not np.all(np.isfinite(step)):
                lam *= 10
                continue
            R, t, X = prob.retract(step)
            new_cost = float(np.sum(prob.w_obs * huber(prob.errors(R, t, X), prob.delta)))
            if np.isfinite(new_cost) and new_cost <= cost:
                prob.R, prob.t, prob.X = R, t, X
                rel = (cost - new_cost) / max(cost, 1e-300)
                cost = new_cost
                report.costs.append(cost)
                lam = max(lam / 10, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted or rel < opts.convergence_tol:
            report.converged = True
            break
    report.final_cost = cost
    return report


def bundle_adjust(smap, opts: BAOptions | None = None, weights: dict | None = None,
                  free_frames=None) -> BAReport:
    """Adjust poses and landmarks in place; the best iterate is always kept."""
    opts = opts or BAOptions()
    prob = BundleProblem(smap, free_frames=free_frames,
                         weights=weights if opts.weight_mode == "similarity" else None,
                         delta=opts.huber_delta)
    report = adjust(prob, opts)
    prob.write_back()
    return report


def filter_outliers(smap, tau_px: float = 2.0, frames=None) -> int:
    """Drop observations reprojecting worse than ``tau_px`` (and landmarks left unsupported).

    Returns the number of violating observations removed.
    """
    fids, lids, errs = smap.reprojection_errors()
    bad = errs > tau_px
    if frames is not None:
        bad &= np.isin(fids, np.asarray(list(frames)))
    for f, l in zip(fids[bad], lids[bad]):
        if l in smap.landmarks and f in smap.landmarks[l].observations:
            smap.remove_observation(int(l), int(f))
    for l in np.unique(lids[bad]):
        lm = smap.landmarks.get(int(l))
        if lm is not None and len(lm.observations) < 2:
            smap.remove_landmark(int(l))
    return int(bad.sum())
