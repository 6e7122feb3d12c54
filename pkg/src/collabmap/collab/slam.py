"""Central back-end, SLAM mode: per-agent keyframe maps merged by place recognition."""

from __future__ import annotations

import hashlib
import logging

import numpy as np

from ..errors import DegenerateGeometry, ModeMismatch
from ..geometry import estimate_relative_pose, project_points, refine_pose
from ..mapper import SparseMap, global_bundle_adjust
from .merge import ransac_similarity_3d, transfer_map
from .messages import EndOfStream, FrameSubmission, KeyframeSubmission, PoseUpdate
from .server import MergeEvent, ServerConfig, SubMap

log = logging.getLogger(__name__)

POSE_UPDATE_TOL = 1e-6


def _pose_moved(a, b) -> bool:
    return bool(np.max(np.abs(a.matrix() - b.matrix())) > POSE_UPDATE_TOL)


class SlamServer:
    """Keyframes are inserted at the agent's proposed pose; maps merge on verified place matches."""

    mode = "slam"

    def __init__(self, K, match_fn, config: ServerConfig | None = None):
        self.K = K
        self.match_fn = match_fn
        self.config = config or ServerConfig()
        self.opts = self.config.mapper
        self.rng = np.random.default_rng(self.config.seed)
        self.submaps: dict[int, SubMap] = {}
        self.agent_submap: dict[int, int] = {}
        self.landmark_of: dict[int, dict] = {}  # agent -> {agent landmark id: server landmark id}
        self._pending: dict[tuple, list] = {}  # (agent, agent landmark) -> [(frame, kp)]
        self.known: dict = {}  # frame -> pose the agent currently holds
        self.views: dict = {}
        self.merge_log: list[MergeEvent] = []
        self.place_matches: list[tuple] = []  # (frame, candidate) pairs that triggered merges
        self.ended: set = set()
        self._next_submap = 0
        self._ingests = 0

    # -- queries ------------------------------------------------------------------------
    def submap_of(self, fid: int) -> int | None:
        for sid, sm in self.submaps.items():
            rec = sm.smap.frames.get(fid)
            if rec is not None and rec.registered:
                return sid
        return None

    def registered_frames(self) -> set:
        return {f for sm in self.submaps.values() for f in sm.members}

    def maps(self) -> list:
        return [self.submaps[s].smap for s in sorted(self.submaps)]

    def audit(self) -> list:
        problems = []
        seen = {}
        for sid, sm in self.submaps.items():
            for f in sm.members:
                if f in seen:
                    problems.append(f"frame {f} in sub-maps {seen[f]} and {sid}")
                seen[f] = sid
            problems += [f"sub-map {sid}: {p}" for p in sm.smap.audit()]
        absorbed = [e.absorbed for e in self.merge_log]
        if len(absorbed) != len(set(absorbed)):
            problems.append("a sub-map was merged twice")
        return problems

    def state_digest(self) -> str:
        h = hashlib.sha256()
        for sid in sorted(self.submaps):
            h.update(f"# {sid}\n".encode())
            for line in self.submaps[sid].smap.export_lines():
                h.update(line.encode() + b"\n")
        return h.hexdigest()

    # -- ingestion ----------------------------------------------------------------------
    def ingest(self, msg) -> list:
        if isinstance(msg, FrameSubmission):
            raise ModeMismatch("SLAM server received a raw frame submission")
        if isinstance(msg, EndOfStream):
            self.ended.add(msg.agent_id)
            return []
        if not isinstance(msg, KeyframeSubmission):
            raise ModeMismatch(f"SLAM server cannot ingest {type(msg).__name__}")
        self._ingests += 1
        sid = self._insert(msg)
        fid = msg.frame.frame_id
        cands = self.detect_place_match(fid, exclude_submap=sid)
        if not cands:
            return []
        by_map = {}
        for c in cands:
            by_map.setdefault(self.submap_of(c), []).append(c)
        other = min(by_map, key=lambda s: (-len(by_map[s]), s))
        ev = self._merge(sid, other, fid, by_map[other])
        if ev is None:
            return []
        return self._pose_updates(ev.survivor)

    def _insert(self, msg: KeyframeSubmission) -> int:
        aid = msg.agent_id
        view = msg.frame
        fid = view.frame_id
        if aid not in self.agent_submap:
            sid = self._next_submap
            self._next_submap += 1
            self.submaps[sid] = SubMap(sid, SparseMap(sid), self._ingests)
            self.agent_submap[aid] = sid
            self.landmark_of[aid] = {}
        sid = self.agent_submap[aid]
        smap = self.submaps[sid].smap
        self.views[fid] = view
        smap.add_frame(view, self.K)
        smap.register(fid, msg.pose)
        self.known[fid] = msg.pose
        lmap = self.landmark_of[aid]
        rec = smap.frames[fid]
        for kp in np.flatnonzero(msg.landmark_ids >= 0):
            alid = int(msg.landmark_ids[kp])
            lid = lmap.get(alid)
            if lid is not None and lid in smap.landmarks:
                if fid not in smap.landmarks[lid].observations and rec.kp_landmark[kp] < 0:
                    smap.add_observation(lid, fid, int(kp))
                if np.all(np.isfinite(msg.landmark_xyz[kp])):
                    smap.landmarks[lid].position = np.array(msg.landmark_xyz[kp], dtype=float)  # agent's latest estimate
                continue
            obs = self._pending.setdefault((aid, alid), [])
            obs.append((fid, int(kp)))
            live = {f: k for f, k in obs if f in smap.frames and smap.frames[f].kp_landmark[k] < 0}
            if len(live) >= 2 and np.all(np.isfinite(msg.landmark_xyz[kp])):
                lmap[alid] = smap.new_landmark(msg.landmark_xyz[kp], live)
                del self._pending[(aid, alid)]
        if smap.fixed_gauge is None and smap.n_registered() >= 2:
            smap.fixed_gauge = tuple(smap.registered_ids[:2])
        self._refine(smap, fid)
        return sid

    def _refine(self, smap: SparseMap, fid: int):
        """Resection refinement of a newly inserted keyframe (kept only if it lowers the error)."""
        if smap.fixed_gauge is not None and fid in smap.fixed_gauge:
            return
        idx, lids = smap.frame_landmarks(fid)
        if len(idx) < self.opts.min_pnp_inliers:
            return
        rec = smap.frames[fid]
        X = smap.positions(lids)
        uv = rec.keypoints[idx]

        def err(p):
            proj, z = project_points(X, p, self.K)
            return np.sum((proj - uv) ** 2) if np.all(z > 0) else np.inf

        cand = refine_pose(rec.pose, X, uv, self.K)
        if err(cand) < err(rec.pose):
            rec.pose = cand

    # -- place recognition --------------------------------------------------------------
    def score(self, a: int, b: int) -> float:
        n = min(len(self.views[a].keypoints), len(self.views[b].keypoints))
        return min(1.0, len(self.match_fn(a, b)) / n) if n else 0.0

    def verify_place(self, fid: int, cand: int):
        """Inlier pairs of a geometrically verified place match, or None."""
        pairs = np.asarray(self.match_fn(fid, cand), dtype=np.int64).reshape(-1, 2)
        if len(pairs) < self.opts.min_edge_inliers:
            return None
        try:
            _, mask = estimate_relative_pose(self.views[fid].keypoints[pairs[:, 0]],
                                             self.views[cand].keypoints[pairs[:, 1]], self.K, self.K,
                                             rng=self.rng, theta_min_deg=self.opts.theta_min_deg,
                                             min_inliers=self.opts.min_edge_inliers)
        except DegenerateGeometry:
            return None
        return pairs[mask]

    def detect_place_match(self, fid: int, exclude_submap: int | None = None) -> list:
        out = []
        for sid in sorted(self.submaps):
            if sid == exclude_submap:
                continue
            for c in self.submaps[sid].members:
                if c == fid or self.score(fid, c) < self.config.s_pr:
                    continue
                if self.verify_place(fid, c) is not None:
                    out.append(c)
        return out

    # -- merging ------------------------------------------------------------------------
    def _merge(self, sa: int, sb: int, fid: int, cands) -> MergeEvent | None:
        A, B = self.submaps[sa].smap, self.submaps[sb].smap
        rec = A.frames[fid]
        src, dst, meta = [], [], []
        for c in cands:
            inl = self.verify_place(fid, c)
            if inl is None:
                continue
            crec = B.frames[c]
            la = rec.kp_landmark[inl[:, 0]]
            lb = crec.kp_landmark[inl[:, 1]]
            for k in np.flatnonzero((la >= 0) & (lb >= 0)):
                src.append(A.landmarks[int(la[k])].position)
                dst.append(B.landmarks[int(lb[k])].position)
                meta.append((c, int(inl[k, 1]), int(la[k]), int(lb[k])))
        if len(src) < self.opts.min_edge_inliers:
            return None
        src, dst = np.array(src), np.array(dst)
        uv = np.array([B.frames[c].keypoints[k] for c, k, _, _ in meta])
        poses = [B.frames[c].pose for c, _, _, _ in meta]

        def check(s, R, t):
            Xb = s * src @ R.T + t
            ok = np.zeros(len(Xb), dtype=bool)
            for i, (X, p) in enumerate(zip(Xb, poses)):
                proj, z = project_points(X[None], p, self.K)
                ok[i] = z[0] > 0 and np.linalg.norm(proj[0] - uv[i]) <= self.opts.filter_px
            return ok

        try:
            s, R, t, inl = ransac_similarity_3d(src, dst, check, self.rng, min_inliers=self.opts.min_edge_inliers)
        except DegenerateGeometry:
            return None
        na, nb = len(self.submaps[sa]), len(self.submaps[sb])
        survivor, absorbed = (sa, sb) if (na > nb or (na == nb and sa < sb)) else (sb, sa)
        if absorbed == sb:  # express B in A's world
            s, R, t = 1.0 / s, R.T, -R.T @ t / s
        dmap, smap = self.submaps[survivor].smap, self.submaps[absorbed].smap
        mapping = transfer_map(dmap, smap, s, R, t)
        for aid, a_sid in list(self.agent_submap.items()):
            if a_sid == absorbed:
                self.agent_submap[aid] = survivor
                self.landmark_of[aid] = {al: mapping[l] for al, l in self.landmark_of[aid].items() if l in mapping}
        for i in np.flatnonzero(inl):
            _, _, la, lb = meta[i]
            a_id, b_id = (la, mapping.get(lb)) if absorbed == sb else (mapping.get(la), lb)
            if a_id is None or b_id is None or a_id not in dmap.landmarks or b_id not in dmap.landmarks:
                continue
            if a_id == b_id or set(dmap.landmarks[a_id].observations) & set(dmap.landmarks[b_id].observations):
                continue
            dmap.merge_landmarks(b_id, a_id)
            self._redirect(a_id, b_id)
        global_bundle_adjust(dmap, self.opts)
        del self.submaps[absorbed]
        ev = MergeEvent(absorbed, survivor, (fid,) + tuple(sorted(set(c for c, _, _, _ in meta))), float(s))
        self.merge_log.append(ev)
        self.place_matches.append((fid, tuple(cands)))
        log.info("place match %d: merged sub-map %d into %d (%d inliers)", fid, absorbed, survivor, int(inl.sum()))
        return ev

    def _redirect(self, drop: int, keep: int):
        for lmap in self.landmark_of.values():
            for al, l in lmap.items():
                if l == drop:
                    lmap[al] = keep

    def _pose_updates(self, sid: int) -> list:
        out = []
        smap = self.submaps[sid].smap
        for fid in smap.registered_ids:
            pose = smap.frames[fid].pose
            if _pose_moved(pose, self.known[fid]):
                out.append(PoseUpdate(fid, pose))
                self.known[fid] = pose
        return out

    def finalize(self) -> list:
        return self.maps()
