"""Scenario simulation, on-disk artifacts and the three mapping pipelines."""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .agent import Agent
from .collab import OtfServer, SlamServer, frame_messages, replay
from .config import RunConfig
from .errors import EmptyReconstruction, ManifestMismatch, ParseError
from .evaluation import TrajectoryEstimate, read_gnss, write_gnss, write_trajectory
from .features import Matcher, read_features, write_features, write_provenance
from .mapper import reconstruct_offline, write_maps
from .scenario import (
    DEFAULT_K,
    FRAME_ID_STRIDE,
    GroundTruthTrack,
    MissionStream,
    World,
    generate_world,
    sample_mission,
)

log = logging.getLogger(__name__)

MANIFEST_HEADER = "# collabmap manifest v1"


@dataclass
class Scenario:
    world: World
    plans: list
    streams: dict  # agent -> MissionStream
    mode: str

    @property
    def frames(self) -> list:
        return [f for a in sorted(self.streams) for f in self.streams[a].frames]

    @property
    def tracks(self) -> dict:
        return {a: s.track for a, s in self.streams.items()}


@dataclass
class PipelineResult:
    method: str
    estimate: TrajectoryEstimate
    maps: list
    timings: dict = field(default_factory=dict)
    server: object = None
    agents: dict = field(default_factory=dict)

    def registered_frames(self) -> set:
        return {f for m in self.maps for f in m.registered_ids}


def mode_for(pipeline: str) -> str:
    return "slam" if pipeline == "slam" else "sfm"


def simulate(cfg: RunConfig, mode: str | None = None) -> Scenario:
    wc, plans = cfg.world_and_plans()
    mode = mode or mode_for(cfg.pipeline)
    world = generate_world(wc, cfg.seed)
    streams = sample_mission(world, plans, mode, DEFAULT_K, cfg.feature_model(), seed=cfg.seed,
                             sigma_gnss=cfg.get("mission.sigma_gnss"))
    return Scenario(world, plans, streams, mode)


def _matcher(scn: Scenario, cfg: RunConfig) -> Matcher:
    return Matcher(scn.frames, scn.world, cfg.feature_model(), seed=cfg.seed)


def _disconnects(cfg: RunConfig) -> dict:
    return dict(cfg.get("run.disconnect") or {})


def _ended(scn: Scenario, cfg: RunConfig) -> dict:
    """Streams shortened by ``run.end_after``: those agents stop early but still sign off."""
    end = dict(cfg.get("run.end_after") or {})
    return {a: MissionStream(a, s.frames[:end[a]] if a in end else s.frames, s.track)
            for a, s in scn.streams.items()}


def _truncate(scn: Scenario, cfg: RunConfig) -> dict:
    cut = _disconnects(cfg)
    out = {}
    for aid, s in _ended(scn, cfg).items():
        frames = s.frames[:cut[aid]] if aid in cut else s.frames
        out[aid] = MissionStream(aid, frames, s.track)
    return out


def _estimate_from_maps(method, maps, views, n_frames) -> TrajectoryEstimate:
    poses, comp = {}, {}
    for m in maps:
        for fid in m.registered_ids:
            rec = m.frames[fid]
            poses.setdefault(rec.agent_id, []).append((views[fid].timestamp, fid, rec.pose))
            comp[fid] = m.map_id
    return TrajectoryEstimate(method, poses, comp, n_frames)


def run_offline(scn: Scenario, cfg: RunConfig) -> PipelineResult:
    t0 = time.perf_counter()
    streams = _truncate(scn, cfg)
    views = {f.frame_id: f.public() for s in streams.values() for f in s.frames}
    n_frames = {a: len(s.frames) for a, s in streams.items()}
    try:
        maps = reconstruct_offline(list(views.values()), _matcher(scn, cfg), DEFAULT_K, cfg.mapper_options())
    except EmptyReconstruction:
        maps = []
    est = _estimate_from_maps("offline", maps, views, n_frames)
    return PipelineResult("offline", est, maps, {"reconstruct": time.perf_counter() - t0})


def run_otf(scn: Scenario, cfg: RunConfig, deterministic: bool | None = None,
            interleave_seed: int | None = None) -> PipelineResult:
    deterministic = cfg.get("run.deterministic") if deterministic is None else deterministic
    t0 = time.perf_counter()
    server = OtfServer(DEFAULT_K, _matcher(scn, cfg), cfg.server_config())
    msgs = frame_messages(_ended(scn, cfg), _disconnects(cfg))
    seed = _interleave_seed(cfg, interleave_seed)
    replay(server, msgs, deterministic=deterministic, seed=seed)
    t1 = time.perf_counter()
    maps = server.finalize()
    t2 = time.perf_counter()
    views = server.views
    n_frames = {a: sum(1 for m in ms if hasattr(m, "frame")) for a, ms in msgs.items()}
    est = _estimate_from_maps("otf", maps, views, n_frames)
    return PipelineResult("otf", est, maps, {"ingest": t1 - t0, "finalize": t2 - t1}, server=server)


def _interleave_seed(cfg, override):
    if override is not None:
        return override
    s = cfg.get("run.interleave_seed")
    if s is not None:
        return s
    return cfg.seed if cfg.get("run.deterministic") else int.from_bytes(os.urandom(4), "little")


def run_slam(scn: Scenario, cfg: RunConfig, deterministic: bool | None = None,
             interleave_seed: int | None = None) -> PipelineResult:
    """Agents track their own streams; keyframes go to the server, pose updates come back."""
    deterministic = cfg.get("run.deterministic") if deterministic is None else deterministic
    t0 = time.perf_counter()
    match = _matcher(scn, cfg)
    acfg = cfg.agent_config()
    server = SlamServer(DEFAULT_K, match, cfg.server_config())
    streams = _truncate(scn, cfg)
    agents = {a: Agent(a, DEFAULT_K, match, acfg, seed=cfg.seed) for a in sorted(streams)}
    queues = {a: [f.public() for f in s.frames] for a, s in streams.items()}
    cut = _disconnects(cfg)

    def deliver(msg):
        ups = server.ingest(msg)
        by_agent = {}
        for u in ups:
            by_agent.setdefault(u.frame_id // FRAME_ID_STRIDE, []).append(u)
        for a, us in sorted(by_agent.items()):
            agents[a].apply_pose_update(us)

    pos = {a: 0 for a in queues}
    rng = np.random.default_rng(_interleave_seed(cfg, interleave_seed))
    while True:
        ready = [a for a in sorted(queues) if pos[a] < len(queues[a])]
        if not ready:
            break
        if deterministic:
            a = min(ready, key=lambda a: (queues[a][pos[a]].timestamp, a))
        else:
            a = ready[int(rng.integers(len(ready)))]
        view = queues[a][pos[a]]
        pos[a] += 1
        _, _, kf = agents[a].process_frame(view)
        if kf is not None:
            deliver(kf)
    for a in sorted(agents):
        for msg in agents[a].finish():
            if a in cut and not hasattr(msg, "frame"):
                continue  # a dropped link never says goodbye
            deliver(msg)
    t1 = time.perf_counter()
    poses, comp = {}, {}
    for a, ag in agents.items():
        sid = server.agent_submap.get(a)
        rows = ag.trajectory()
        if rows:
            poses[a] = rows
            for _, fid, _ in rows:
                comp[fid] = sid if sid is not None else f"agent-{a}"
    est = TrajectoryEstimate("slam", poses, comp, {a: len(q) for a, q in queues.items()})
    return PipelineResult("slam", est, server.finalize(), {"track_and_merge": t1 - t0}, server=server,
                          agents=agents)


RUNNERS = {"offline": run_offline, "otf": run_otf, "slam": run_slam}


def run_pipeline(scn: Scenario, cfg: RunConfig, pipeline: str | None = None) -> PipelineResult:
    return RUNNERS[pipeline or cfg.pipeline](scn, cfg)


# -- artifacts --------------------------------------------------------------------------


def write_world(world: World, path):
    with open(path, "w") as fh:
        x0, x1, y0, y1 = world.extent
        head = " ".join(repr(float(v)) for v in (x0, x1, y0, y1))
        fh.write(f"# world v1 seed {world.seed} extent {head} h_noise {float(world.h_noise)!r}\n")
        for (x, y, z), g in zip(world.landmarks.tolist(), world.groups.tolist()):
            fh.write(f"{x!r} {y!r} {z!r} {int(g)}\n")


def read_world(path) -> World:
    with open(path) as fh:
        lines = fh.read().split("\n")
    head = lines[0].split()
    if head[:3] != ["#", "world", "v1"] or len(head) != 12:
        raise ParseError("bad world header", path, 1)
    try:
        seed = int(head[4])
        extent = tuple(float(v) for v in head[6:10])
        h = float(head[11])
        rows = [ln.split() for ln in lines[1:] if ln.strip()]
        xyz = np.array([[float(v) for v in r[:3]] for r in rows])
        groups = np.array([int(r[3]) for r in rows], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise ParseError(str(exc), path) from None
    return World(xyz, groups, extent, seed, h)


def _write_true(path, tracks):
    fake = [GroundTruthTrack(t.agent_id, t.times, t.true_positions, t.true_positions) for t in tracks]
    write_gnss(path, fake)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def write_scenario(scn: Scenario, cfg: RunConfig, out) -> list:
    """World, per-agent feature streams, provenance sidecars and GNSS files, plus the manifest."""
    sdir = os.path.join(out, "streams")
    os.makedirs(sdir, exist_ok=True)
    files = ["streams/world.txt"]
    write_world(scn.world, os.path.join(out, files[0]))
    for aid in sorted(scn.streams):
        s = scn.streams[aid]
        names = {k: f"streams/agent_{aid}.{k}" for k in ("features", "provenance", "gnss", "true")}
        write_features(s.frames, os.path.join(out, names["features"]))
        write_provenance(s.frames, os.path.join(out, names["provenance"]))
        write_gnss(os.path.join(out, names["gnss"]), [s.track])
        _write_true(os.path.join(out, names["true"]), [s.track])
        files += list(names.values())
    write_manifest(cfg, out, files, scn.mode)
    return files


def write_manifest(cfg: RunConfig, out, files, mode, outputs=()):
    """Resolved config plus hashes of the input artifacts and (after a run) of its outputs."""
    with open(os.path.join(out, "manifest.txt"), "w") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        fh.write(f"mode {mode}\n")
        for line in cfg.resolved_lines():
            fh.write(f"config {line}\n")
        for f in files:
            fh.write(f"artifact {f} {sha256_file(os.path.join(out, f))}\n")
        for f in outputs:
            fh.write(f"output {f} {sha256_file(os.path.join(out, f))}\n")


def read_manifest(out, with_outputs: bool = False):
    path = os.path.join(out, "manifest.txt")
    if not os.path.exists(path):
        raise ManifestMismatch(f"no manifest in {out}")
    config, artifacts, outputs, mode = {}, {}, {}, None
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines[0] != MANIFEST_HEADER:
        raise ManifestMismatch("unrecognized manifest header")
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        kind, _, rest = line.partition(" ")
        if kind == "mode":
            mode = rest
        elif kind == "config":
            k, _, v = rest.partition(" = ")
            config[k] = v
        elif kind == "artifact":
            name, digest = rest.rsplit(" ", 1)
            artifacts[name] = digest
        elif kind == "output":
            name, digest = rest.rsplit(" ", 1)
            outputs[name] = digest
        else:
            raise ParseError(f"unknown manifest entry {kind!r}", path, n)
    if with_outputs:
        return config, artifacts, mode, outputs
    return config, artifacts, mode


def verify_manifest(out) -> tuple:
    config, artifacts, mode = read_manifest(out)
    for name, digest in artifacts.items():
        p = os.path.join(out, name)
        if not os.path.exists(p):
            raise ManifestMismatch(f"missing artifact {name}")
        if sha256_file(p) != digest:
            raise ManifestMismatch(f"artifact {name} does not match the manifest")
    return config, artifacts, mode


def load_scenario(out) -> tuple:
    """Re-read a simulated scenario directory; returns (Scenario, RunConfig from the manifest)."""
    config, artifacts, mode = verify_manifest(out)
    cfg = RunConfig(config)
    world = read_world(os.path.join(out, "streams/world.txt"))
    _, plans = cfg.world_and_plans()
    streams = {}
    for name in sorted(artifacts):
        if not name.endswith(".features"):
            continue
        base = name[: -len(".features")]
        aid = int(base.rsplit("_", 1)[1])
        frames = read_features(os.path.join(out, name), os.path.join(out, base + ".provenance"))
        tracks = read_gnss(os.path.join(out, base + ".gnss"), os.path.join(out, base + ".true"))
        track = tracks.get(aid, GroundTruthTrack(aid, np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))))
        streams[aid] = MissionStream(aid, frames, track)
    return Scenario(world, plans, streams, mode), cfg


def write_outputs(res: PipelineResult, out) -> list:
    """Trajectory files (replacing any from an earlier run) and the map export; relative paths."""
    tdir = os.path.join(out, "traj")
    os.makedirs(tdir, exist_ok=True)
    os.makedirs(os.path.join(out, "maps"), exist_ok=True)
    for old in os.listdir(tdir):
        if old.endswith(".traj"):
            os.remove(os.path.join(tdir, old))
    files = []
    for aid in sorted(res.estimate.poses):
        rel = f"traj/agent_{aid}.traj"
        write_trajectory(os.path.join(out, rel), aid, res.estimate.poses[aid], res.estimate.component)
        files.append(rel)
    rel = f"maps/{res.method}.map"
    write_maps(res.maps, os.path.join(out, rel))
    files.append(rel)
    return files
