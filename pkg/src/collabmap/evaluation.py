"""Trajectory alignment, accuracy figures and result tables.

Estimated camera centers are associated with ground-truth samples by nearest
timestamp, aligned with a 7-DoF similarity (monocular estimates have free
scale) and scored by the RMSE of the residuals.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateGeometry, InsufficientOverlap, ParseError
from .geometry import Pose, umeyama_align

TRAJ_HEADER = "# traj v1"
CSV_COLUMNS = ("method", "agent", "rmse_m", "completeness", "component", "agents_registered", "status")


@dataclass
class EvalOptions:
    d_max: float = 15.0
    extent_ratio_min: float = 0.1
    lost_partial_below: float = 0.95
    window_s: float = 0.5
    reference: str = "gnss"  # or "true"

    def __post_init__(self):
        if self.reference not in ("gnss", "true"):
            raise ValueError(f"unknown reference {self.reference!r}")


@dataclass
class TrajectoryEstimate:
    """Per-agent ``(timestamp, frame_id, pose)`` lists plus the map component of every frame."""

    method: str
    poses: dict  # agent -> list of (t, frame_id, Pose)
    component: dict  # frame_id -> component id
    n_frames: dict = field(default_factory=dict)  # agent -> number of input frames

    def __post_init__(self):
        for aid, rows in self.poses.items():
            rows.sort(key=lambda r: r[0])
            ts = np.array([r[0] for r in rows])
            if len(ts) > 1 and np.any(np.diff(ts) <= 0):
                raise ValueError(f"agent {aid}: timestamps not strictly increasing")
            for _, fid, _ in rows:
                if fid not in self.component:
                    raise ValueError(f"frame {fid} has no component")

    def completeness(self, aid) -> float:
        n = self.n_frames.get(aid, len(self.poses.get(aid, ())))
        return len(self.poses.get(aid, ())) / n if n else 0.0

    def agent_components(self, aid) -> dict:
        counts = {}
        for _, fid, _ in self.poses.get(aid, ()):
            c = self.component[fid]
            counts[c] = counts.get(c, 0) + 1
        return counts

    def main_component(self, aid):
        counts = self.agent_components(aid)
        if not counts:
            return None
        return min(counts, key=lambda c: (-counts[c], c))


@dataclass
class AgentResult:
    agent: int
    rmse: float | None
    completeness: float
    component: object
    status: str


@dataclass
class EvalReport:
    method: str
    agents: list
    collaborative_rmse: float | None
    collaborative_status: str
    agents_registered: str
    flights: list = field(default_factory=list)


# -- alignment --------------------------------------------------------------------------


def _line_similarity(src, dst):
    """Similarity for collinear sources: map the source line onto the target's main axis."""
    ms, md = src.mean(0), dst.mean(0)
    xs, xd = src - ms, dst - md
    ds = np.linalg.svd(xs)[2][0]
    proj_s = xs @ ds
    if not np.any(proj_s):
        raise DegenerateGeometry("estimate collapsed to a point")
    # least-squares direction in the target for the 1D source coordinate
    v = xd.T @ proj_s
    nv = np.linalg.norm(v)
    if nv == 0:
        raise DegenerateGeometry("no correlation between estimate and reference")
    dd = v / nv
    s = float(nv / np.sum(proj_s**2))
    axis = np.cross(ds, dd)
    sa, ca = np.linalg.norm(axis), float(np.dot(ds, dd))
    if sa < 1e-15:
        if ca > 0:
            R = np.eye(3)
        else:  # half turn about any axis perpendicular to ds
            perp = np.linalg.svd(ds[None])[2][1]
            R = 2 * np.outer(perp, perp) - np.eye(3)
    else:
        R = Rotation.from_rotvec(axis / sa * np.arctan2(sa, ca)).as_matrix()
    return s, R, md - s * R @ ms


def align_similarity(src, dst):
    """Umeyama with a fallback for (near) collinear sources, where rotation about the line is free."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    try:
        return umeyama_align(src, dst, with_scale=True)
    except DegenerateGeometry:
        if len(src) < 3:
            raise
        return _line_similarity(src, dst)


def _associate(rows, times, window):
    """Index pairs (estimate row, ground-truth sample) by nearest timestamp within ``window``."""
    if not rows or not len(times):
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    te = np.array([r[0] for r in rows])
    j = np.searchsorted(te, times)
    lo = np.clip(j - 1, 0, len(te) - 1)
    hi = np.clip(j, 0, len(te) - 1)
    pick = np.where(np.abs(te[lo] - times) <= np.abs(te[hi] - times), lo, hi)
    ok = np.abs(te[pick] - times) <= window
    return pick[ok], np.flatnonzero(ok)


def matched_pairs(est: TrajectoryEstimate, gt: dict, agents, opts: EvalOptions, component=None):
    src, dst = [], []
    for aid in agents:
        rows = est.poses.get(aid, [])
        if component is not None:
            rows = [r for r in rows if est.component[r[1]] == component]
        track = gt[aid]
        ref = track.gnss_positions if opts.reference == "gnss" else track.true_positions
        ie, ig = _associate(rows, np.asarray(track.times), opts.window_s)
        src += [rows[i][2].center for i in ie]
        dst += [ref[i] for i in ig]
    return np.array(src).reshape(-1, 3), np.array(dst).reshape(-1, 3)


def _aligned(src, dst):
    s, R, t = align_similarity(src, dst)
    al = s * src @ R.T + t
    return al, float(np.sqrt(np.mean(np.sum((al - dst) ** 2, axis=1))))


def align_and_rmse(est: TrajectoryEstimate, gt: dict, scope: str = "per-agent", agent=None,
                   opts: EvalOptions | None = None) -> float:
    """RMSE (m) after similarity alignment; ``gt`` maps agent id -> GroundTruthTrack.

    Raises ``InsufficientOverlap`` with fewer than 3 associated samples or,
    collaboratively, when the agents do not share one map component; raises
    ``DegenerateGeometry`` when alignment fails or the RMSE exceeds ``d_max``.
    """
    opts = opts or EvalOptions()
    if scope == "per-agent":
        if agent is None:
            raise ValueError("per-agent scope needs an agent id")
        agents, comp = [agent], est.main_component(agent)
        if comp is None:
            raise InsufficientOverlap(f"agent {agent} has no estimated poses")
    elif scope == "collaborative":
        agents = sorted(gt)
        comps = set()
        for aid in agents:
            comps.update(est.agent_components(aid))
            if not est.poses.get(aid):
                raise InsufficientOverlap(f"agent {aid} has no estimated poses")
        if len(comps) != 1:
            raise InsufficientOverlap(f"agents span {len(comps)} map components")
        comp = comps.pop()
    else:
        raise ValueError(f"unknown scope {scope!r}")
    src, dst = matched_pairs(est, gt, agents, opts, comp)
    if len(src) < 3:
        raise InsufficientOverlap(f"{len(src)} associated samples")
    _, rmse = _aligned(src, dst)
    if not np.isfinite(rmse) or rmse > opts.d_max:
        raise DegenerateGeometry(f"rmse {rmse:.3g} m exceeds d_max")
    return rmse


def extent_ratio(src, dst) -> float:
    """Spread of the aligned estimate relative to the reference spread."""
    try:
        al, _ = _aligned(src, dst)
    except DegenerateGeometry:
        return 0.0
    sd = np.sqrt(np.mean(np.sum((dst - dst.mean(0)) ** 2, axis=1)))
    sa = np.sqrt(np.mean(np.sum((al - al.mean(0)) ** 2, axis=1)))
    return float(sa / sd) if sd > 0 else 0.0


def classify(est: TrajectoryEstimate, gt: dict, opts: EvalOptions | None = None) -> EvalReport:
    opts = opts or EvalOptions()
    results = []
    for aid in sorted(gt):
        comp = est.main_component(aid)
        compl = est.completeness(aid)
        rmse, status = None, "ok"
        try:
            rmse = align_and_rmse(est, gt, "per-agent", aid, opts)
            src, dst = matched_pairs(est, gt, [aid], opts, comp)
            if extent_ratio(src, dst) < opts.extent_ratio_min:
                status, rmse = "degen", None
        except (DegenerateGeometry, InsufficientOverlap):
            status = "degen"
        if status == "ok" and compl < opts.lost_partial_below:
            status = "lost-partial"
        results.append(AgentResult(aid, rmse, compl, comp, status))
    try:
        coll, cstatus = align_and_rmse(est, gt, "collaborative", opts=opts), "ok"
    except (DegenerateGeometry, InsufficientOverlap):
        coll, cstatus = None, "degen"
    members = {}
    for r in results:
        if r.component is not None:
            members.setdefault(r.component, set()).add(r.agent)
    k = max((len(v) for v in members.values()), default=0)
    return EvalReport(est.method, results, coll, cstatus, f"{k}/{len(gt)}", flights=sorted(gt))


def report_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rep in reports:
        for r in rep.agents:
            w.writerow([rep.method, r.agent, "" if r.rmse is None else f"{r.rmse:.6f}", f"{r.completeness:.6f}",
                        "" if r.component is None else r.component, rep.agents_registered, r.status])
        w.writerow([rep.method, "coll", "" if rep.collaborative_rmse is None else f"{rep.collaborative_rmse:.6f}",
                    "", "", rep.agents_registered, rep.collaborative_status])
    return buf.getvalue()


def _cell(rmse, status) -> str:
    if status == "degen" or rmse is None:
        return "degen"
    return f"{rmse:.2f}" + (" (lost)" if status == "lost-partial" else "")


def report_table(reports) -> str:
    """Methods as rows; one column per flight, then Coll and #."""
    flights = sorted({r.agent for rep in reports for r in rep.agents})
    header = ["RMSE [m]"] + [f"Fl {a}" for a in flights] + ["Coll", "#"]
    rows = []
    for rep in reports:
        by = {r.agent: r for r in rep.agents}
        cells = [rep.method]
        for a in flights:
            r = by.get(a)
            cells.append("-" if r is None else _cell(r.rmse, r.status))
        cells += [_cell(rep.collaborative_rmse, rep.collaborative_status), rep.agents_registered]
        rows.append(cells)
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def report(reports, fmt: str = "csv") -> str:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports")
    if fmt == "csv":
        return report_csv(reports)
    if fmt in ("text", "text-table"):
        return report_table(reports)
    raise ValueError(f"unknown report format {fmt!r}")


# -- files ------------------------------------------------------------------------------
# Trajectory lines: ``t agent_id tx ty tz qw qx qy qz`` with the camera position and the
# camera-to-world rotation. ``# map <id>`` lines open a map-component section.


def _g(v) -> str:
    return f"{float(v):.12g}"


def write_trajectory(path, agent_id: int, rows, component: dict):
    rows = sorted(rows, key=lambda r: r[0])
    with open(path, "w") as fh:
        fh.write(TRAJ_HEADER + "\n")
        cur = object()
        for t, fid, pose in rows:
            comp = component.get(fid, 0)
            if comp != cur:
                fh.write(f"# map {comp}\n")
                cur = comp
            q = Rotation.from_matrix(pose.R.T).as_quat(scalar_first=True)
            if q[0] < 0:
                q = -q
            vals = [t, agent_id, *pose.center, *q]
            fh.write(" ".join([_g(vals[0]), str(agent_id)] + [_g(v) for v in vals[2:]]) + "\n")


def read_trajectory(path):
    """Returns ``{agent: [(t, pseudo_frame_id, Pose)]}`` and ``{pseudo_frame_id: component}``."""
    poses, comps = {}, {}
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0].strip() != TRAJ_HEADER:
        raise ParseError(f"missing '{TRAJ_HEADER}' header", path, 1)
    comp = 0
    for n, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "map":
                comp = _parse_int(parts[1], path, n)
            continue
        parts = line.split()
        if len(parts) != 9:
            raise ParseError(f"expected 9 fields, got {len(parts)}", path, n)
        t = _parse_float(parts[0], path, n)
        aid = _parse_int(parts[1], path, n)
        c = np.array([_parse_float(p, path, n) for p in parts[2:5]])
        q = np.array([_parse_float(p, path, n) for p in parts[5:9]])
        if np.linalg.norm(q) == 0:
            raise ParseError("zero quaternion", path, n)
        R_wc = Rotation.from_quat(q, scalar_first=True).as_matrix()
        fid = (aid, len(poses.get(aid, ())))
        poses.setdefault(aid, []).append((t, fid, Pose.from_center(R_wc.T, c)))
        comps[fid] = comp
    return poses, comps


def load_estimate(paths, method: str = "estimate", n_frames: dict | None = None) -> TrajectoryEstimate:
    poses, comps = {}, {}
    for p in paths:
        pp, cc = read_trajectory(p)
        for aid, rows in pp.items():
            poses.setdefault(aid, []).extend(rows)
        comps.update(cc)
    return TrajectoryEstimate(method, poses, comps, dict(n_frames or {}))


def write_gnss(path, tracks):
    with open(path, "w") as fh:
        for tr in tracks:
            for t, x in zip(tr.times, tr.gnss_positions):
                fh.write(" ".join([_g(t), str(tr.agent_id)] + [_g(v) for v in x]) + "\n")


def read_gnss(path, true_path=None) -> dict:
    """GNSS lines ``t agent_id x y z`` -> ``{agent: GroundTruthTrack}`` (true = GNSS unless given)."""
    from .scenario import GroundTruthTrack

    def parse(p):
        out = {}
        with open(p) as fh:
            lines = fh.read().split("\n")
        for n, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ParseError(f"expected 5 fields, got {len(parts)}", p, n)
            t = _parse_float(parts[0], p, n)
            aid = _parse_int(parts[1], p, n)
            out.setdefault(aid, []).append((t, [_parse_float(v, p, n) for v in parts[2:]]))
        return out

    g = parse(path)
    tr = parse(true_path) if true_path is not None else g
    tracks = {}
    for aid, rows in g.items():
        times = np.array([r[0] for r in rows])
        gnss = np.array([r[1] for r in rows])
        true = np.array([r[1] for r in tr.get(aid, rows)])
        if true.shape != gnss.shape:
            raise ParseError(f"agent {aid}: true and GNSS sample counts differ", true_path)
        tracks[aid] = GroundTruthTrack(aid, times, true, gnss)
    return tracks


def _parse_float(s, path, line) -> float:
    try:
        v = float(s)
    except ValueError:
        raise ParseError(f"not a number: {s!r}", path, line) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite value {s!r}", path, line)
    return v


def _parse_int(s, path, line) -> int:
    try:
        return int(s)
    except ValueError:
        raise ParseError(f"not an integer: {s!r}", path, line) from None
