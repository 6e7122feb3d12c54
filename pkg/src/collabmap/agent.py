"""V-SLAM style agent front-end.

The agent tracks every frame against the landmarks of its last few keyframes,
promotes frames to keyframes when tracking thins out and uploads them. There
is no relocalization: once the tracked inlier count drops below ``T_lost`` the
agent stays lost for the rest of the mission.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .collab.messages import EndOfStream, KeyframeSubmission
from .errors import DegenerateGeometry, OutOfOrderFrame, PnPFailed, UnknownFrame
from .geometry import Pose, estimate_relative_pose, project_points, solve_pnp, triangulate
from .mapper import MapperOptions, MatchGraph, SparseMap, bundle_adjust, extend_and_triangulate, filter_outliers
from .mapper.bundle import BAOptions
from .mapper.incremental import initialize_map

log = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    T_lost: int = 20
    keyframe_ratio: float = 0.9
    keyframe_max_gap: int = 30
    frame_rate: float = 30.0
    local_keyframes: int = 10  # covisibility window for tracking
    ba_keyframes: int = 5  # keyframes moved by local BA
    ba_iterations: int = 10
    init_max_frames: int = 90  # frames buffered while searching for an initial pair
    init_parallax_deg: float = 5.0  # median ray angle the initial pair must reach
    visibility_margin_px: float = 200.0
    track_px: float = 4.0  # resection consensus while tracking
    mapper: MapperOptions = field(default_factory=MapperOptions)

    def __post_init__(self):
        if self.T_lost < 4:
            raise ValueError("T_lost must be >= 4")
        if not 0 < self.keyframe_ratio < 1:
            raise ValueError("keyframe_ratio must lie in (0, 1)")
        if self.keyframe_max_gap < 1:
            raise ValueError("keyframe_max_gap must be >= 1")


@dataclass(frozen=True)
class Initializing:
    pass


@dataclass(frozen=True)
class Tracking:
    reference_keyframe: int


@dataclass(frozen=True)
class Lost:
    last_tracked: int | None


class Agent:
    """One agent's tracker and keyframe map (keyframes only in ``smap``)."""

    def __init__(self, agent_id: int, K, match_fn, config: AgentConfig | None = None, seed: int = 0):
        self.agent_id = agent_id
        self.K = K
        self.match_fn = match_fn
        self.config = config or AgentConfig()
        self.opts = self.config.mapper
        self.rng = np.random.default_rng([seed, agent_id])
        self.state = Initializing()
        self.smap = SparseMap(agent_id)
        self.graph = MatchGraph()
        self.views: dict = {}
        self.poses: dict[int, Pose] = {}
        self.anchor: dict[int, int] = {}  # non-keyframe -> preceding keyframe
        self.keyframes: list[int] = []
        self.processed: list[int] = []
        self.inlier_counts: dict[int, int] = {}
        self._init_buffer: list = []
        self._pending_kf: int | None = None
        self._last_t = -np.inf
        self._since_kf = 0

    # -- public API ---------------------------------------------------------------------
    def process_frame(self, view):
        """Returns ``(state, pose or None, KeyframeSubmission or None)``."""
        if view.timestamp <= self._last_t:
            raise OutOfOrderFrame(f"frame {view.frame_id} at t={view.timestamp} after t={self._last_t}")
        self._last_t = view.timestamp
        self.views[view.frame_id] = view
        self.processed.append(view.frame_id)
        if isinstance(self.state, Lost):
            return self.state, None, None
        if isinstance(self.state, Initializing):
            return self._initialize(view)
        return self._track(view)

    def finish(self) -> list:
        """Messages closing the stream: the held-back keyframe (if any) and EndOfStream."""
        out = []
        if self._pending_kf is not None:
            out.append(self._submission(self._pending_kf))
            self._pending_kf = None
        out.append(EndOfStream(self.agent_id))
        return out

    def trajectory(self) -> list:
        """(timestamp, frame_id, pose) for every frame with a pose, in time order."""
        return [(self.views[f].timestamp, f, self.poses[f]) for f in self.processed if f in self.poses]

    @property
    def completeness(self) -> float:
        return len(self.poses) / len(self.processed) if self.processed else 0.0

    def apply_pose_update(self, updates):
        """Overwrite keyframe poses; other frames follow their anchor keyframe rigidly."""
        updates = list(updates)
        for u in updates:
            if u.frame_id not in self.poses:
                raise UnknownFrame(f"agent {self.agent_id} never produced frame {u.frame_id}")
        if not updates:
            return
        new = {u.frame_id: u.pose for u in updates}
        old = {f: self.poses[f] for f in new}
        kf_new = [f for f in new if f in self.smap.frames]
        scale = self._update_scale(old, new, kf_new)
        old_kf = {f: self.smap.frames[f].pose for f in kf_new}
        # frames the update does not mention (including keyframes not yet uploaded)
        # follow the nearest preceding updated keyframe
        moved = dict(new)
        a = None
        for f in self.processed:
            if f in new and f in self.smap.frames:
                a = f
            elif f in self.poses and f not in new and a is not None:
                rel = self.poses[f] @ old[a].inverse()
                moved[f] = Pose.from_Rt(rel.R, scale * rel.translation) @ new[a]
                if f in self.smap.frames:
                    old_kf[f] = self.smap.frames[f].pose
        for f, p in moved.items():
            self.poses[f] = p
            if f in self.smap.frames:
                self.smap.frames[f].pose = p
        self._retriangulate(old_kf, moved, scale)

    # -- internals ----------------------------------------------------------------------
    @staticmethod
    def _update_scale(old, new, kfs) -> float:
        if len(kfs) < 2:
            return 1.0
        co = np.array([old[f].center for f in kfs])
        cn = np.array([new[f].center for f in kfs])
        so = np.sqrt(np.sum((co - co.mean(0)) ** 2))
        sn = np.sqrt(np.sum((cn - cn.mean(0)) ** 2))
        return float(sn / so) if so > 1e-12 else 1.0

    def _retriangulate(self, old_kf, new, scale):
        changed = set(old_kf)
        for lm in self.smap.landmarks.values():
            obs = list(lm.observations.items())
            if not changed.intersection(lm.observations):
                continue
            try:
                lm.position = triangulate([(self.smap.frames[f].pose, self.K, self.smap.frames[f].keypoints[k])
                                           for f, k in obs], theta_min_deg=0.0)
                continue
            except DegenerateGeometry:
                pass
            a = next(f for f, _ in obs if f in changed)
            Xc = old_kf[a].transform(lm.position[None])[0] * scale
            lm.position = new[a].inverse().transform(Xc[None])[0]

    def _submission(self, fid: int) -> KeyframeSubmission:
        rec = self.smap.frames[fid]
        ids = rec.kp_landmark.copy()
        xyz = np.full((len(ids), 3), np.nan)
        have = ids >= 0
        if have.any():
            xyz[have] = self.smap.positions(ids[have])
        return KeyframeSubmission(self.agent_id, self.views[fid], rec.pose, ids, xyz)

    def _initialize(self, view):
        self._init_buffer.append(view)
        if len(self._init_buffer) > self.config.init_max_frames:
            self._init_buffer.pop(0)
        first = self._init_buffer[0]
        if view is first:
            return self.state, None, None
        pairs = np.asarray(self.match_fn(first.frame_id, view.frame_id), dtype=np.int64).reshape(-1, 2)
        try:
            rel, mask = estimate_relative_pose(first.keypoints[pairs[:, 0]], view.keypoints[pairs[:, 1]],
                                               self.K, self.K, rng=self.rng,
                                               theta_min_deg=max(self.config.init_parallax_deg, self.opts.theta_min_deg),
                                               min_inliers=self.opts.min_edge_inliers)
            a, b = first.frame_id, view.frame_id
            initialize_map(self.smap, self.views, self.K, a, b, rel, pairs[mask], self.opts)
        except DegenerateGeometry:
            self.smap = SparseMap(self.agent_id)
            if len(pairs) < self.opts.min_edge_inliers:
                self._init_buffer.pop(0)  # the oldest frame no longer overlaps
            return self.state, None, None
        self.graph.add_edge(a, b, pairs[mask])
        self.keyframes = [a, b]
        self.poses[a] = self.smap.frames[a].pose
        self.poses[b] = self.smap.frames[b].pose
        for v in self._init_buffer[1:-1]:
            p = self._resect(v)
            if p is not None:
                self.poses[v.frame_id] = p[0]
                self.anchor[v.frame_id] = a
        for v in self._init_buffer:
            if v.frame_id not in self.poses:
                self.views.pop(v.frame_id, None)
        self._init_buffer = []
        self.state = Tracking(b)
        self._pending_kf = b
        self._since_kf = 0
        self.inlier_counts[b] = len(self.smap.frame_landmarks(b)[0])
        log.info("agent %d initialized on frames %d, %d", self.agent_id, a, b)
        return self.state, self.poses[b], self._submission(a)

    def _predict(self) -> Pose | None:
        tracked = [f for f in reversed(self.processed[:-1]) if f in self.poses][:2]
        if not tracked:
            return None
        if len(tracked) == 1:
            return self.poses[tracked[0]]
        p1, p0 = self.poses[tracked[0]], self.poses[tracked[1]]
        return (p1 @ p0.inverse()) @ p1

    def _correspondences(self, view, predicted):
        window = self.keyframes[-self.config.local_keyframes:]
        kp_all, lm_all = [], []
        self._last_pairs = {}
        for kf in reversed(window):
            pairs = np.asarray(self.match_fn(view.frame_id, kf), dtype=np.int64).reshape(-1, 2)
            self._last_pairs[kf] = pairs
            if not len(pairs):
                continue
            lids = self.smap.frames[kf].kp_landmark[pairs[:, 1]]
            keep = lids >= 0
            kp_all.append(pairs[keep, 0])
            lm_all.append(lids[keep])
        if not kp_all:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        kp, lm = np.concatenate(kp_all), np.concatenate(lm_all)
        _, first = np.unique(kp, return_index=True)
        first.sort()
        kp, lm = kp[first], lm[first]
        _, first = np.unique(lm, return_index=True)
        first.sort()
        kp, lm = kp[first], lm[first]
        if predicted is not None and len(lm):
            uv, z = project_points(self.smap.positions(lm), predicted, self.K)
            m = self.config.visibility_margin_px
            vis = (z > 0) & (uv[:, 0] >= -m) & (uv[:, 0] <= self.K.width + m) \
                & (uv[:, 1] >= -m) & (uv[:, 1] <= self.K.height + m)
            kp, lm = kp[vis], lm[vis]
        return kp, lm

    def _resect(self, view, predicted=None):
        kp, lm = self._correspondences(view, predicted)
        if len(kp) < 4:
            return None
        try:
            pose, mask = solve_pnp(self.smap.positions(lm), view.keypoints[kp], self.K, rng=self.rng,
                                   threshold_px=self.config.track_px,
                                   min_inliers=min(self.opts.min_pnp_inliers, self.config.T_lost))
        except PnPFailed:
            return None
        return pose, kp[mask], lm[mask]

    def _lose(self, fid):
        tracked = [f for f in self.processed if f in self.poses]
        self.state = Lost(tracked[-1] if tracked else None)
        log.info("agent %d lost tracking at frame %d", self.agent_id, fid)
        return self.state, None, None

    def _track(self, view):
        fid = view.frame_id
        res = self._resect(view, self._predict())
        n = 0 if res is None else len(res[1])
        self.inlier_counts[fid] = n
        if n < self.config.T_lost:
            return self._lose(fid)
        pose, kp, lm = res
        self.poses[fid] = pose
        ref = self.state.reference_keyframe
        ref_n = max(1, self.inlier_counts.get(ref, 1))
        self._since_kf += 1
        if n / ref_n >= self.config.keyframe_ratio and self._since_kf < self.config.keyframe_max_gap:
            self.anchor[fid] = self.keyframes[-1]
            return self.state, pose, None
        return self._make_keyframe(view, pose, kp, lm)

    def _make_keyframe(self, view, pose, kp, lm):
        fid = view.frame_id
        self.smap.add_frame(view, self.K)
        self.smap.register(fid, pose)
        for i, l in zip(kp, lm):
            if fid not in self.smap.landmarks[int(l)].observations:
                self.smap.add_observation(int(l), fid, int(i))
        for kf, pairs in self._last_pairs.items():
            if len(pairs):
                self.graph.add_edge(fid, kf, pairs)
        extend_and_triangulate(self.smap, fid, self.graph, self.opts)
        self.keyframes.append(fid)
        free = self.keyframes[-self.config.ba_keyframes:]
        ba = BAOptions(max_iterations=self.config.ba_iterations, huber_delta=self.opts.ba.huber_delta,
                       convergence_tol=self.opts.ba.convergence_tol)
        bundle_adjust(self.smap, ba, free_frames=free)
        filter_outliers(self.smap, self.opts.filter_px, frames=free)
        for f in free:
            self.poses[f] = self.smap.frames[f].pose
        self.state = Tracking(fid)
        self._since_kf = 0
        out = self._submission(self._pending_kf) if self._pending_kf is not None else None
        self._pending_kf = fid
        return self.state, self.poses[fid], out
