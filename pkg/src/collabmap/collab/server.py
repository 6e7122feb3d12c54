"""Central back-end, On-the-Fly mode: frames stream in, sub-maps grow and merge.

The server only sees public frame views and a matcher returning index pairs;
it never touches the simulator's hidden channel.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateGeometry, ModeMismatch, NoInitialPair, PnPFailed
from ..geometry import solve_pnp
from ..mapper import (
    BAOptions,
    MapperOptions,
    MatchGraph,
    SparseMap,
    bundle_adjust,
    correspondences_2d3d,
    extend_and_triangulate,
    filter_outliers,
    grow_map,
    local_bundle_adjust,
    register_frame,
    similarity_weights,
    start_map,
)
from ..mapper.incremental import add_verified_edge, local_window
from .merge import fuse_mutual, link_bridge, similarity_from_pose_pairs, transfer_map
from .messages import EndOfStream, FrameSubmission, KeyframeSubmission

log = logging.getLogger(__name__)


@dataclass
class ServerConfig:
    retrieval_k: int | None = 10  # None = exhaustive
    n_merge: int = 3
    s_pr: float = 0.15
    weighted_ba: bool = True
    mapper: MapperOptions = field(default_factory=MapperOptions)
    seed: int = 0

    def __post_init__(self):
        if self.retrieval_k is not None and self.retrieval_k < 1:
            raise ValueError("retrieval_k must be >= 1 or None")
        if self.n_merge < 2:
            raise ValueError("n_merge must be >= 2")


@dataclass
class SubMap:
    submap_id: int
    smap: SparseMap
    created: int  # ingest counter at creation

    @property
    def members(self) -> list:
        return self.smap.registered_ids

    def __len__(self):
        return self.smap.n_registered()


@dataclass(frozen=True)
class MergeEvent:
    absorbed: int
    survivor: int
    bridges: tuple
    scale: float


def resect(smap: SparseMap, view, K, graph: MatchGraph, rng, opts: MapperOptions):
    """PnP of ``view`` against ``smap`` without touching it: (pose, kp inliers, landmark inliers)."""
    kp, lids = correspondences_2d3d(smap, view.frame_id, graph)
    if len(kp) < max(4, opts.min_pnp_inliers):
        raise PnPFailed(f"frame {view.frame_id}: {len(kp)} 2D-3D correspondences")
    pose, mask = solve_pnp(smap.positions(lids), view.keypoints[kp], K, rng=rng,
                           threshold_px=opts.tau_px, min_inliers=opts.min_pnp_inliers)
    return pose, kp[mask], lids[mask]


class OtfServer:
    """Asynchronous frame ingestion into similarity-grouped sub-maps."""

    mode = "otf"

    def __init__(self, K, match_fn, config: ServerConfig | None = None):
        self.K = K
        self.match_fn = match_fn
        self.config = config or ServerConfig()
        self.opts = self.config.mapper
        self.rng = np.random.default_rng(self.config.seed)
        self.views: dict = {}
        self.submaps: dict[int, SubMap] = {}
        self.buffer: list = []
        self.graph = MatchGraph()
        self.merge_log: list[MergeEvent] = []
        self.ended: set = set()
        self.retrieval: dict[int, list] = {}  # frame -> [(score, other)] best first
        self._scores: dict = {}
        self._bridge_tries: dict = {}
        self._next_submap = 0
        self._ingests = 0

    # -- scoring ------------------------------------------------------------------------
    def score(self, a: int, b: int) -> float:
        key = (min(a, b), max(a, b))
        s = self._scores.get(key)
        if s is None:
            pairs = self.match_fn(*key)
            n = min(len(self.views[a].keypoints), len(self.views[b].keypoints))
            s = min(1.0, len(pairs) / n) if n else 0.0
            self._scores[key] = s
        return s

    def _retrieve(self, fid: int) -> list:
        ranked = []
        for other in sorted(self.views):
            if other == fid:
                continue
            s = self.score(fid, other)
            if s > 0:
                ranked.append((s, other))
        ranked.sort(key=lambda x: (-x[0], x[1]))
        k = self.config.retrieval_k
        top = ranked if k is None else ranked[:k]
        self.retrieval[fid] = top
        for _, other in top:
            add_verified_edge(self.graph, self.views, fid, other, self.match_fn, self.rng,
                              self.opts.min_edge_inliers)
        return top

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
        for f in self.buffer:
            if f in seen:
                problems.append(f"buffered frame {f} is registered in {seen[f]}")
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
        h.update(repr(sorted(self.buffer)).encode())
        return h.hexdigest()

    # -- ingestion ----------------------------------------------------------------------
    def ingest(self, msg) -> list:
        if isinstance(msg, KeyframeSubmission):
            raise ModeMismatch("OtF server received a keyframe submission")
        if isinstance(msg, EndOfStream):
            self.ended.add(msg.agent_id)
            return []
        if not isinstance(msg, FrameSubmission):
            raise ModeMismatch(f"OtF server cannot ingest {type(msg).__name__}")
        self._ingests += 1
        view = msg.frame
        fid = view.frame_id
        if fid in self.views:
            return []
        self.views[fid] = view
        self.graph.add_node(fid)
        top = self._retrieve(fid)
        sid = self._register_anywhere(fid, top)
        if sid is None:
            self.buffer.append(fid)
            self._try_new_submap()
        else:
            self._after_registration(sid, fid)
        return []

    def _candidate_submaps(self, top) -> list:
        best = {}
        for s, other in top:
            sid = self.submap_of(other)
            if sid is not None:
                best[sid] = max(best.get(sid, 0.0), s)
        return sorted(best, key=lambda sid: (-best[sid], sid))

    def _register_anywhere(self, fid: int, top) -> int | None:
        for sid in self._candidate_submaps(top):
            try:
                register_frame(self.submaps[sid].smap, self.views[fid], self.K, self.graph, self.rng, self.opts)
            except PnPFailed:
                continue
            return sid
        return None

    def _local_ba(self, smap: SparseMap, fid: int):
        if not self.config.weighted_ba:
            local_bundle_adjust(smap, fid, self.opts)
            return
        window = local_window(smap, fid, self.opts.local_ba_window)
        ba = BAOptions(max_iterations=self.opts.local_ba_iterations, huber_delta=self.opts.ba.huber_delta,
                       weight_mode="similarity", convergence_tol=self.opts.ba.convergence_tol)
        bundle_adjust(smap, ba, weights=similarity_weights(smap, self.score), free_frames=window)
        filter_outliers(smap, self.opts.filter_px, frames=window)

    def _global_ba(self, smap: SparseMap):
        ba = self.opts.ba
        weights = None
        if self.config.weighted_ba:
            ba = BAOptions(max_iterations=ba.max_iterations, huber_delta=ba.huber_delta,
                           weight_mode="similarity", convergence_tol=ba.convergence_tol,
                           initial_lambda=ba.initial_lambda)
            weights = similarity_weights(smap, self.score)
        bundle_adjust(smap, ba, weights=weights)
        if filter_outliers(smap, self.opts.filter_px):
            bundle_adjust(smap, ba, weights=weights)

    def _after_registration(self, sid: int, fid: int):
        sm = self.submaps[sid]
        self._local_ba(sm.smap, fid)
        self._count_since_global(sid)
        new = [fid] + self._drain_buffer(sid)
        self.check_merge(new)

    def _count_since_global(self, sid: int):
        sm = self.submaps[sid]
        sm.since_global = getattr(sm, "since_global", 0) + 1
        if sm.since_global >= self.opts.global_ba_every:
            self._global_ba(sm.smap)
            sm.since_global = 0

    def _drain_buffer(self, sid: int) -> list:
        """Register buffered frames into ``sid`` while any succeeds."""
        smap = self.submaps[sid].smap
        done = grow_map(smap, self.views, self.K, self.graph, set(self.buffer), self.rng, self.opts,
                        on_register=lambda m, f: None)
        for f in done:
            self.buffer.remove(f)
        return done

    def _try_new_submap(self):
        if len(self.buffer) < 2:
            return
        pool = set(self.buffer)
        try:
            smap = start_map(self.views, self.K, self.graph, pool, self.rng, self.opts, map_id=self._next_submap)
        except NoInitialPair:
            return
        sid = self._next_submap
        self._next_submap += 1
        self.submaps[sid] = SubMap(sid, smap, self._ingests)
        for f in smap.registered_ids:
            self.buffer.remove(f)
        new = smap.registered_ids + self._drain_buffer(sid)
        log.info("new sub-map %d from buffer (%d frames)", sid, len(smap.registered_ids))
        self.check_merge(new)

    # -- merging ------------------------------------------------------------------------
    def _bridge_candidates(self, new_frames) -> set:
        """Frames whose cross-sub-map resection may have changed."""
        cand = set(new_frames)
        for f in new_frames:
            cand.update(self.graph.neighbors(f))
        return {f for f in cand if self.submap_of(f) is not None}

    def _bridges(self, sa: int, sb: int) -> list:
        """Bridge frames between two sub-maps as (fid, home sub-map, resection result)."""
        out = []
        for home, other in ((sa, sb), (sb, sa)):
            target = self.submaps[other].smap
            for fid in self.submaps[home].members:
                key = (fid, other)
                n = len(correspondences_2d3d(target, fid, self.graph)[0])
                if n < self.opts.min_pnp_inliers:
                    continue
                prev = self._bridge_tries.get(key)
                if prev is not None and prev[0] == n and prev[1] is None:
                    continue
                try:
                    res = resect(target, self.views[fid], self.K, self.graph, self.rng, self.opts)
                except PnPFailed:
                    self._bridge_tries[key] = (n, None)
                    continue
                self._bridge_tries[key] = (n, True)
                out.append((fid, home, res))
        return out

    def check_merge(self, new_frames=()) -> list:
        """Merge every sub-map pair sharing at least ``n_merge`` bridge frames."""
        events = []
        touched = {self.submap_of(f) for f in new_frames} - {None}
        while len(self.submaps) >= 2:
            merged = False
            ids = sorted(self.submaps)
            pairs = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]
                     if not touched or a in touched or b in touched]
            for a, b in pairs:
                if not self._linked(a, b):
                    continue
                bridges = self._bridges(a, b)
                if len(bridges) < self.config.n_merge:
                    continue
                ev = self._merge(a, b, bridges)
                if ev is None:
                    continue
                events.append(ev)
                touched = {ev.survivor}
                merged = True
                break
            if not merged:
                break
        return events

    def _linked(self, a: int, b: int) -> bool:
        mb = set(self.submaps[b].members)
        return any(nb in mb for f in self.submaps[a].members for nb in self.graph.neighbors(f))

    def _merge(self, a: int, b: int, bridges) -> MergeEvent | None:
        na, nb = len(self.submaps[a]), len(self.submaps[b])
        survivor, absorbed = (a, b) if (na > nb or (na == nb and a < b)) else (b, a)
        dst, src = self.submaps[survivor].smap, self.submaps[absorbed].smap
        src_poses, dst_poses = [], []
        for fid, home, (pose, _, _) in bridges:
            if home == absorbed:
                src_poses.append(src.frames[fid].pose)
                dst_poses.append(pose)
            else:
                src_poses.append(pose)
                dst_poses.append(dst.frames[fid].pose)
        try:
            s, R, t = similarity_from_pose_pairs(src_poses, dst_poses)
        except DegenerateGeometry:
            return None
        mapping = transfer_map(dst, src, s, R, t)
        for fid, home, (_, kps, lids) in bridges:
            if home == absorbed:
                link_bridge(dst, fid, kps, lids)
            else:
                sel = [i for i, l in enumerate(lids) if int(l) in mapping]
                link_bridge(dst, fid, kps[sel], [mapping[int(lids[i])] for i in sel])
        self._global_ba(dst)
        moved = src.registered_ids
        self._fuse_across(dst, moved)
        for fid in moved:
            if fid in dst.frames and dst.frames[fid].registered:
                extend_and_triangulate(dst, fid, self.graph, self.opts)
        self._global_ba(dst)
        del self.submaps[absorbed]
        ev = MergeEvent(absorbed, survivor, tuple(sorted(f for f, _, _ in bridges)), float(s))
        self.merge_log.append(ev)
        self._bridge_tries = {k: v for k, v in self._bridge_tries.items() if k[1] != absorbed}
        log.info("merged sub-map %d into %d via %d bridges", absorbed, survivor, len(bridges))
        # frames the absorbed map could not take may now fit
        self._drain_buffer(survivor)
        return ev

    def _fuse_across(self, smap: SparseMap, moved):
        moved = set(moved)
        for f in sorted(moved):
            for g in self.graph.neighbors(f):
                if g in moved or g not in smap.frames or not smap.frames[g].registered:
                    continue
                pairs = self.graph.pairs(f, g)
                la = smap.frames[f].kp_landmark[pairs[:, 0]]
                lb = smap.frames[g].kp_landmark[pairs[:, 1]]
                for k in np.flatnonzero((la >= 0) & (lb >= 0) & (la != lb)):
                    fuse_mutual(smap, int(la[k]), int(lb[k]), self.opts.filter_px)

    # -- end of mission -----------------------------------------------------------------
    def finalize(self) -> list:
        """Exhaust buffered frames and merges, then a global BA per sub-map."""
        while True:
            before = (len(self.buffer), len(self.submaps))
            for sid in sorted(self.submaps):
                new = self._drain_buffer(sid)
                if new:
                    self.check_merge(new)
            self._try_new_submap()
            self.check_merge([f for sm in self.submaps.values() for f in sm.members])
            if (len(self.buffer), len(self.submaps)) == before:
                break
        for sid in sorted(self.submaps):
            self._global_ba(self.submaps[sid].smap)
        return self.maps()
