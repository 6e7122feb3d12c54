"""Incremental reconstruction: verified match graph, initial pair, resection loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateGeometry, EmptyReconstruction, NoInitialPair, PnPFailed
from ..geometry import (
    MIN_RELPOSE_INLIERS,
    N_PNP_MIN,
    REPROJ_THRESHOLD_PX,
    THETA_TRI_MIN_DEG,
    CameraIntrinsics,
    Pose,
    estimate_relative_pose,
    project_points,
    ransac_fundamental,
    solve_pnp,
    triangulate_pairs,
)
from .bundle import BAOptions, bundle_adjust, filter_outliers
from .sparse_map import SparseMap

log = logging.getLogger(__name__)


@dataclass
class MapperOptions:
    theta_min_deg: float = THETA_TRI_MIN_DEG
    tau_px: float = REPROJ_THRESHOLD_PX  # resection consensus
    filter_px: float = 2 * REPROJ_THRESHOLD_PX  # track gates and post-BA filtering
    min_pnp_inliers: int = N_PNP_MIN
    min_edge_inliers: int = MIN_RELPOSE_INLIERS
    local_ba_window: int = 5
    global_ba_every: int = 10
    local_ba_iterations: int = 10
    ba: BAOptions = field(default_factory=BAOptions)
    seed: int = 0


class MatchGraph:
    """Geometrically verified pairwise matches, stored once per unordered pair."""

    def __init__(self):
        self._pairs: dict[tuple, np.ndarray] = {}
        self._adj: dict[int, set] = {}
        self.tested: set = set()

    def add_node(self, fid: int):
        self._adj.setdefault(fid, set())

    def add_edge(self, a: int, b: int, pairs: np.ndarray):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if a > b:
            a, b, pairs = b, a, pairs[:, ::-1]
        self._pairs[(a, b)] = np.ascontiguousarray(pairs)
        self._adj.setdefault(a, set()).add(b)
        self._adj.setdefault(b, set()).add(a)

    def pairs(self, a: int, b: int) -> np.ndarray:
        if a < b:
            return self._pairs[(a, b)]
        return self._pairs[(b, a)][:, ::-1]

    def has_edge(self, a, b) -> bool:
        return (min(a, b), max(a, b)) in self._pairs

    def neighbors(self, fid: int) -> list:
        return sorted(self._adj.get(fid, ()))

    def count(self, a, b) -> int:
        return len(self._pairs.get((min(a, b), max(a, b)), ()))

    @property
    def nodes(self) -> list:
        return sorted(self._adj)

    def edges(self):
        return sorted(self._pairs)

    def components(self, nodes=None) -> list:
        """Connected components (sorted lists), largest first then by smallest id."""
        nodes = set(self._adj if nodes is None else nodes)
        seen, comps = set(), []
        for n in sorted(nodes):
            if n in seen:
                continue
            stack, comp = [n], []
            seen.add(n)
            while stack:
                u = stack.pop()
                comp.append(u)
                for v in self._adj.get(u, ()):
                    if v in nodes and v not in seen:
                        seen.add(v)
                        stack.append(v)
            comps.append(sorted(comp))
        return sorted(comps, key=lambda c: (-len(c), c[0]))


def verify_matches(view_a, view_b, pairs, rng, min_inliers: int = MIN_RELPOSE_INLIERS,
                   threshold_px: float = REPROJ_THRESHOLD_PX):
    """Epipolar RANSAC filter of putative pairs; None when fewer than ``min_inliers`` survive."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) < max(min_inliers, 8):
        return None
    uv1 = view_a.keypoints[pairs[:, 0]]
    uv2 = view_b.keypoints[pairs[:, 1]]
    _, mask = ransac_fundamental(uv1, uv2, rng, threshold_px=threshold_px)
    if mask is None or mask.sum() < min_inliers:
        return None
    return pairs[mask]


def add_verified_edge(graph: MatchGraph, views: dict, a: int, b: int, match_fn, rng,
                      min_inliers: int = MIN_RELPOSE_INLIERS) -> bool:
    key = (min(a, b), max(a, b))
    if key in graph.tested:
        return graph.has_edge(a, b)
    graph.tested.add(key)
    graph.add_node(a)
    graph.add_node(b)
    inl = verify_matches(views[key[0]], views[key[1]], match_fn(*key), rng, min_inliers)
    if inl is None:
        return False
    graph.add_edge(key[0], key[1], inl)
    return True


def build_match_graph(views: dict, match_fn, rng, min_inliers: int = MIN_RELPOSE_INLIERS) -> MatchGraph:
    """Exhaustive pairwise matching followed by geometric verification."""
    graph = MatchGraph()
    ids = sorted(views)
    for fid in ids:
        graph.add_node(fid)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            add_verified_edge(graph, views, a, b, match_fn, rng, min_inliers)
    return graph


def select_initial_pair(views: dict, graph: MatchGraph, K, rng=None, candidates=None,
                        opts: MapperOptions | None = None):
    """Highest-count verified pair whose relative pose is non-degenerate.

    Returns ``(a, b, relative_pose, inlier_pairs)``; raises ``NoInitialPair``.
    """
    opts = opts or MapperOptions()
    rng = rng if rng is not None else np.random.default_rng(opts.seed)
    pool = set(views if candidates is None else candidates)
    edges = [(graph.count(a, b), a, b) for a, b in graph.edges() if a in pool and b in pool]
    edges.sort(key=lambda e: (-e[0], e[1], e[2]))
    for _, a, b in edges:
        pairs = graph.pairs(a, b)
        try:
            rel, mask = estimate_relative_pose(views[a].keypoints[pairs[:, 0]], views[b].keypoints[pairs[:, 1]],
                                               _k(K, a), _k(K, b), rng=rng, theta_min_deg=opts.theta_min_deg,
                                               min_inliers=opts.min_edge_inliers)
        except DegenerateGeometry:
            continue
        return a, b, rel, pairs[mask]
    raise NoInitialPair("no verified pair with sufficient parallax")


def _k(K, fid) -> CameraIntrinsics:
    return K[fid] if isinstance(K, dict) else K


def initialize_map(smap: SparseMap, views: dict, K, a: int, b: int, rel: Pose, pairs,
                   opts: MapperOptions, pose_a: Pose | None = None, scale: float = 1.0):
    """Seed ``smap`` with frames a, b and their triangulated inlier matches."""
    pose_a = pose_a or Pose.identity()
    rel = Pose.from_Rt(rel.R, rel.translation * scale)
    pose_b = rel @ pose_a
    ra = smap.add_frame(views[a], _k(K, a))
    rb = smap.add_frame(views[b], _k(K, b))
    X, ang, za, zb = triangulate_pairs(pose_a, ra.K, views[a].keypoints[pairs[:, 0]],
                                       pose_b, rb.K, views[b].keypoints[pairs[:, 1]])
    ok = _triangulation_gate(X, ang, za, zb, pose_a, ra, pairs[:, 0], pose_b, rb, pairs[:, 1], opts)
    if ok.sum() < opts.min_pnp_inliers:
        raise DegenerateGeometry("initial pair triangulated too few points")
    smap.register(a, pose_a)
    smap.register(b, pose_b)
    for k in np.flatnonzero(ok):
        smap.new_landmark(X[k], {a: int(pairs[k, 0]), b: int(pairs[k, 1])})
    smap.fixed_gauge = (a, b)
    bundle_adjust(smap, opts.ba)
    filter_outliers(smap, opts.filter_px)


def _reproj_err(X, pose, K, uv):
    proj, z = project_points(X, pose, K)
    e = np.linalg.norm(proj - uv, axis=1)
    e[~(z > 0)] = np.inf
    return e


def _triangulation_gate(X, ang, za, zb, pose_a, ra, ia, pose_b, rb, ib, opts):
    ok = np.isfinite(X).all(axis=1) & (za > 0) & (zb > 0) & (np.degrees(ang) >= opts.theta_min_deg)
    if not ok.any():
        return ok
    ea = _reproj_err(X, pose_a, ra.K, ra.keypoints[ia])
    eb = _reproj_err(X, pose_b, rb.K, rb.keypoints[ib])
    return ok & (ea <= opts.filter_px) & (eb <= opts.filter_px)


def correspondences_2d3d(smap: SparseMap, fid: int, graph: MatchGraph):
    """Keypoint indices of ``fid`` and the map landmarks they match through registered neighbours."""
    kp_out, lm_out = [], []
    for nb in graph.neighbors(fid):
        rec = smap.frames.get(nb)
        if rec is None or not rec.registered:
            continue
        pairs = graph.pairs(fid, nb)
        lids = rec.kp_landmark[pairs[:, 1]]
        keep = lids >= 0
        kp_out.append(pairs[keep, 0])
        lm_out.append(lids[keep])
    if not kp_out:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    kp = np.concatenate(kp_out)
    lm = np.concatenate(lm_out)
    # first claim wins for both keypoints and landmarks
    _, first_kp = np.unique(kp, return_index=True)
    first_kp.sort()
    kp, lm = kp[first_kp], lm[first_kp]
    _, first_lm = np.unique(lm, return_index=True)
    first_lm.sort()
    return kp[first_lm], lm[first_lm]


def register_frame(smap: SparseMap, view, K: CameraIntrinsics, graph: MatchGraph, rng,
                   opts: MapperOptions | None = None) -> Pose:
    """Resect ``view`` against the map and grow tracks; the map is untouched on failure."""
    opts = opts or MapperOptions()
    fid = view.frame_id
    if fid in smap.frames and smap.frames[fid].registered:
        raise ValueError(f"frame {fid} already registered")
    kp, lids = correspondences_2d3d(smap, fid, graph)
    if len(kp) < max(4, opts.min_pnp_inliers):
        raise PnPFailed(f"frame {fid}: {len(kp)} 2D-3D correspondences")
    uv = np.asarray(view.keypoints, dtype=float)[kp]
    pose, mask = solve_pnp(smap.positions(lids), uv, K, rng=rng, threshold_px=opts.tau_px,
                           min_inliers=opts.min_pnp_inliers)
    smap.add_frame(view, K)
    smap.register(fid, pose)
    for i, l in zip(kp[mask], lids[mask]):
        smap.add_observation(int(l), fid, int(i))
    extend_and_triangulate(smap, fid, graph, opts)
    return pose


def extend_and_triangulate(smap: SparseMap, fid: int, graph: MatchGraph, opts: MapperOptions) -> int:
    """Track extension and new-landmark triangulation against registered neighbours."""
    rec = smap.frames[fid]
    nbs = [nb for nb in graph.neighbors(fid) if nb in smap.frames and smap.frames[nb].registered]
    nbs.sort(key=lambda nb: (-graph.count(fid, nb), nb))
    created = 0
    for nb in nbs:
        other = smap.frames[nb]
        pairs = graph.pairs(fid, nb)
        la = rec.kp_landmark[pairs[:, 0]]
        lb = other.kp_landmark[pairs[:, 1]]
        # extend an existing track into the frame lacking it
        for src_l, dst_rec, dst_kp in ((lb, rec, pairs[:, 0]), (la, other, pairs[:, 1])):
            sel = np.flatnonzero((src_l >= 0) & (dst_rec.kp_landmark[dst_kp] < 0))
            if not len(sel):
                continue
            X = smap.positions(src_l[sel])
            e = _reproj_err(X, dst_rec.pose, dst_rec.K, dst_rec.keypoints[dst_kp[sel]])
            for k in sel[e <= opts.filter_px]:
                l = int(src_l[k])
                if dst_rec.frame_id not in smap.landmarks[l].observations and dst_rec.kp_landmark[dst_kp[k]] < 0:
                    smap.add_observation(l, dst_rec.frame_id, int(dst_kp[k]))
        la = rec.kp_landmark[pairs[:, 0]]
        lb = other.kp_landmark[pairs[:, 1]]
        for k in np.flatnonzero((la >= 0) & (lb >= 0) & (la != lb)):
            fuse_landmarks(smap, int(la[k]), int(lb[k]), opts.filter_px)
        la = rec.kp_landmark[pairs[:, 0]]
        lb = other.kp_landmark[pairs[:, 1]]
        sel = np.flatnonzero((la < 0) & (lb < 0))
        if not len(sel):
            continue
        ia, ib = pairs[sel, 0], pairs[sel, 1]
        X, ang, za, zb = triangulate_pairs(rec.pose, rec.K, rec.keypoints[ia], other.pose, other.K, other.keypoints[ib])
        ok = _triangulation_gate(X, ang, za, zb, rec.pose, rec, ia, other.pose, other, ib, opts)
        for k in np.flatnonzero(ok):
            smap.new_landmark(X[k], {fid: int(ia[k]), nb: int(ib[k])})
            created += 1
    return created


def fuse_landmarks(smap: SparseMap, a: int, b: int, gate_px: float) -> bool:
    """Merge two landmarks judged identical when one position explains all observations."""
    if a not in smap.landmarks or b not in smap.landmarks or a == b:
        return False
    la, lb = smap.landmarks[a], smap.landmarks[b]
    if set(la.observations) & set(lb.observations):
        return False
    keep, drop = (a, b) if len(la.observations) >= len(lb.observations) else (b, a)
    X = smap.landmarks[keep].position[None]
    for fid, kp in smap.landmarks[drop].observations.items():
        rec = smap.frames[fid]
        if _reproj_err(X, rec.pose, rec.K, rec.keypoints[kp][None])[0] > gate_px:
            return False
    smap.merge_landmarks(keep, drop)
    return True


def local_window(smap: SparseMap, fid: int, size: int) -> list:
    cov = smap.covisibility(fid)
    best = sorted(cov, key=lambda f: (-cov[f], f))[:size]
    return [fid] + best


def local_bundle_adjust(smap: SparseMap, fid: int, opts: MapperOptions):
    window = local_window(smap, fid, opts.local_ba_window)
    ba = BAOptions(max_iterations=opts.local_ba_iterations, huber_delta=opts.ba.huber_delta,
                   weight_mode="uniform", convergence_tol=opts.ba.convergence_tol)
    rep = bundle_adjust(smap, ba, free_frames=window)
    filter_outliers(smap, opts.filter_px, frames=window)
    return rep


def global_bundle_adjust(smap: SparseMap, opts: MapperOptions, weights=None):
    rep = bundle_adjust(smap, opts.ba, weights=weights)
    if filter_outliers(smap, opts.filter_px):
        rep = bundle_adjust(smap, opts.ba, weights=weights)
    return rep


def grow_map(smap: SparseMap, views: dict, K, graph: MatchGraph, pool, rng, opts: MapperOptions,
             on_register=None) -> list:
    """Next-best-view registration loop over ``pool``; returns frame ids in registration order."""
    order = []
    failed: dict[int, int] = {}  # frame -> correspondence count at last failure
    since_global = 0
    while True:
        best, best_n = None, 0
        for fid in sorted(pool):
            if fid in smap.frames and smap.frames[fid].registered:
                continue
            n = len(correspondences_2d3d(smap, fid, graph)[0])
            if n < opts.min_pnp_inliers or failed.get(fid) == n:
                continue
            if n > best_n:
                best, best_n = fid, n
        if best is None:
            break
        try:
            register_frame(smap, views[best], _k(K, best), graph, rng, opts)
        except PnPFailed:
            failed[best] = best_n
            continue
        order.append(best)
        local_bundle_adjust(smap, best, opts)
        since_global += 1
        if since_global >= opts.global_ba_every:
            global_bundle_adjust(smap, opts)
            since_global = 0
        if on_register is not None:
            on_register(smap, best)
    return order


def reconstruct_offline(views, match_fn, K, opts: MapperOptions | None = None,
                        graph: MatchGraph | None = None) -> list:
    """Offline incremental SfM over all frames; one map per reconstructable component.

    ``views`` are public frame views (keypoints only); ``match_fn(a, b)``
    returns putative index pairs.
    """
    opts = opts or MapperOptions()
    views = {v.frame_id: (v.public() if hasattr(v, "public") else v) for v in views}
    if len(views) < 2:
        raise EmptyReconstruction("need at least two frames")
    rng = np.random.default_rng(opts.seed)
    if graph is None:
        graph = build_match_graph(views, match_fn, rng, opts.min_edge_inliers)
    remaining = set(views)
    maps = []
    while len(remaining) >= 2:
        try:
            smap = start_map(views, K, graph, remaining, rng, opts, map_id=len(maps))
        except NoInitialPair:
            break
        grow_map(smap, views, K, graph, remaining, rng, opts)
        global_bundle_adjust(smap, opts)
        maps.append(smap)
        remaining -= set(smap.registered_ids)
        log.info("map %d: %d frames, %d landmarks", smap.map_id, smap.n_registered(), len(smap.landmarks))
    if not maps:
        raise EmptyReconstruction("no initial pair could be found")
    return maps


def start_map(views, K, graph, pool, rng, opts, map_id=0) -> SparseMap:
    """Initial-pair selection over ``pool`` with fall-through on failed triangulation."""
    tried = set()
    while True:
        cand_pool = set(pool)
        a, b, rel, pairs = select_initial_pair(
            views, _ExcludingGraph(graph, tried), K, rng, cand_pool, opts)
        smap = SparseMap(map_id)
        try:
            initialize_map(smap, views, K, a, b, rel, pairs, opts)
            return smap
        except DegenerateGeometry:
            tried.add((a, b))


class _ExcludingGraph:
    """View of a match graph hiding a set of edges."""

    def __init__(self, graph, excluded):
        self.graph = graph
        self.excluded = excluded

    def edges(self):
        return [e for e in self.graph.edges() if e not in self.excluded]

    def __getattr__(self, name):
        return getattr(self.graph, name)
