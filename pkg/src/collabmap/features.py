"""Synthetic keypoint detection and a viewing-angle-limited matcher.

Frames carry a hidden channel (ground-truth landmark ids and camera pose).
Only :class:`Matcher` and the evaluation code read it; mapping code works on
:class:`FrameView` objects, which do not have these attributes at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .geometry import CameraIntrinsics, Pose, project_points, ray_angles


@dataclass(frozen=True)
class FeatureModel:
    theta_max: float = 60.0
    p_detect: float = 1.0
    pixel_sigma: float = 0.0
    outlier_rate: float = 0.0
    repetitive_confusion: float = 0.0

    def __post_init__(self):
        if not 0 < self.theta_max <= 180:
            raise ValueError("theta_max must be in (0, 180]")
        for name in ("p_detect", "outlier_rate", "repetitive_confusion"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        if self.pixel_sigma < 0:
            raise ValueError("pixel_sigma must be non-negative")


SIFT_LIKE = FeatureModel(theta_max=60.0)
LEARNED = FeatureModel(theta_max=150.0)


@dataclass(frozen=True)
class FrameView:
    """What a mapper is allowed to see of a frame."""

    frame_id: int
    agent_id: int
    timestamp: float
    keypoints: np.ndarray

    def __len__(self):
        return len(self.keypoints)


@dataclass
class FrameFeatures:
    frame_id: int
    agent_id: int
    timestamp: float
    keypoints: np.ndarray
    provenance: np.ndarray  # hidden: landmark id per keypoint
    true_pose: Pose | None = None  # hidden

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        self.provenance = np.asarray(self.provenance, dtype=np.int64).reshape(-1)
        if len(self.keypoints) != len(self.provenance):
            raise ValueError("provenance length must equal keypoint count")

    def __len__(self):
        return len(self.keypoints)

    def public(self) -> FrameView:
        kp = self.keypoints.copy()
        kp.flags.writeable = False
        return FrameView(self.frame_id, self.agent_id, self.timestamp, kp)


@dataclass
class MatchSet:
    frame_a: int
    frame_b: int
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))  # hidden

    def __len__(self):
        return len(self.pairs)

    def swapped(self) -> "MatchSet":
        return MatchSet(self.frame_b, self.frame_a, self.pairs[:, ::-1].copy(), self.labels.copy())

    def subset(self, mask) -> "MatchSet":
        return MatchSet(self.frame_a, self.frame_b, self.pairs[mask], self.labels[mask])

    def public(self) -> np.ndarray:
        out = self.pairs.copy()
        out.flags.writeable = False
        return out


def detect(world, pose: Pose, K: CameraIntrinsics, model: FeatureModel, rng,
           frame_id: int = 0, agent_id: int = 0, timestamp: float = 0.0) -> FrameFeatures:
    """Detect every in-frustum landmark with probability ``p_detect``."""
    landmarks = world.landmarks if hasattr(world, "landmarks") else np.asarray(world, dtype=float)
    uv, z = project_points(landmarks, pose, K)
    visible = (z > 0) & K.in_bounds(np.nan_to_num(uv, nan=-1.0))
    idx = np.flatnonzero(visible)
    keep = rng.random(len(idx)) < model.p_detect
    idx = idx[keep]
    kp = uv[idx]
    if model.pixel_sigma > 0:
        kp = kp + rng.normal(0.0, model.pixel_sigma, kp.shape)
    kp[:, 0] = np.clip(kp[:, 0], 0.0, np.nextafter(K.width, 0))
    kp[:, 1] = np.clip(kp[:, 1], 0.0, np.nextafter(K.height, 0))
    return FrameFeatures(frame_id, agent_id, float(timestamp), kp, idx, pose)


def pair_rng(seed: int, id_a: int, id_b: int) -> np.random.Generator:
    """Order-independent generator for a frame pair."""
    lo, hi = sorted((int(id_a), int(id_b)))
    return np.random.default_rng([int(seed), lo, hi])


def _one_to_one(pairs: np.ndarray, labels: np.ndarray):
    if len(pairs) == 0:
        return pairs, labels
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs, labels = pairs[order], labels[order]
    used_a, used_b = set(), set()
    keep = np.zeros(len(pairs), dtype=bool)
    for k, (i, j) in enumerate(pairs):
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        keep[k] = True
    return pairs[keep], labels[keep]


def match(a: FrameFeatures, b: FrameFeatures, model: FeatureModel, rng, world) -> MatchSet:
    """Simulated descriptor matching between two frames of the same world.

    Co-detected landmarks match when their viewing rays differ by at most
    ``theta_max``. Random wrong pairs and repetitive-texture swaps are then
    injected and the result is made one-to-one (lowest index wins).
    """
    if a.frame_id > b.frame_id:
        return match(b, a, model, rng, world).swapped()

    common, ia, ib = np.intersect1d(a.provenance, b.provenance, assume_unique=True, return_indices=True)
    if len(common):
        pts = world.landmarks[common]
        ang = np.degrees(ray_angles(a.true_pose.center, b.true_pose.center, pts))
        ok = ang <= model.theta_max
        ia, ib, common = ia[ok], ib[ok], common[ok]
    pairs = np.stack([ia, ib], axis=1).astype(np.int64) if len(ia) else np.zeros((0, 2), dtype=np.int64)
    labels = np.ones(len(pairs), dtype=bool)

    groups = getattr(world, "groups", None)
    if model.repetitive_confusion > 0 and groups is not None and len(pairs):
        g_of_b = groups[b.provenance]
        flip = rng.random(len(pairs)) < model.repetitive_confusion
        for k in np.flatnonzero(flip):
            g = groups[common[k]]
            if g < 0:
                continue
            cands = np.flatnonzero((g_of_b == g) & (b.provenance != common[k]))
            if len(cands):
                pairs[k, 1] = cands[rng.integers(len(cands))]
                labels[k] = False

    n_out = math.ceil(model.outlier_rate * int(labels.sum())) if model.outlier_rate > 0 else 0
    if n_out and len(a) > 1 and len(b) > 1:
        oa = rng.integers(0, len(a), n_out)
        ob = rng.integers(0, len(b), n_out)
        wrong = a.provenance[oa] != b.provenance[ob]
        extra = np.stack([oa[wrong], ob[wrong]], axis=1)
        pairs = np.concatenate([pairs, extra])
        labels = np.concatenate([labels, np.zeros(len(extra), dtype=bool)])

    pairs, labels = _one_to_one(pairs, labels)
    return MatchSet(a.frame_id, b.frame_id, pairs, labels)


def similarity_score(a, b, matches) -> float:
    n = min(len(a), len(b))
    if n == 0:
        return 0.0
    return min(1.0, len(matches) / n)


class Matcher:
    """Pairwise matching service bound to one world and feature model.

    This is the only object in a pipeline holding the hidden channel; it
    hands back plain index pairs.
    """

    def __init__(self, frames, world, model: FeatureModel, seed: int = 0):
        self._frames = {}
        self.world = world
        self.model = model
        self.seed = seed
        self._cache = {}
        for f in frames:
            self.add(f)

    def add(self, frame: FrameFeatures):
        self._frames[frame.frame_id] = frame

    def __contains__(self, frame_id):
        return frame_id in self._frames

    def matchset(self, id_a: int, id_b: int) -> MatchSet:
        key = (min(id_a, id_b), max(id_a, id_b))
        ms = self._cache.get(key)
        if ms is None:
            a, b = self._frames[key[0]], self._frames[key[1]]
            ms = match(a, b, self.model, pair_rng(self.seed, *key), self.world)
            self._cache[key] = ms
        return ms if id_a <= id_b else ms.swapped()

    def __call__(self, id_a: int, id_b: int) -> np.ndarray:
        return self.matchset(id_a, id_b).public()

    def similarity(self, id_a: int, id_b: int) -> float:
        ms = self.matchset(id_a, id_b)
        return similarity_score(self._frames[id_a], self._frames[id_b], ms)


# --- text format -----------------------------------------------------------------------


def write_features(frames, path):
    """Line format: ``frame <id> <agent> <t> <n>`` followed by ``u v`` lines."""
    with open(path, "w") as fh:
        for f in frames:
            fh.write(f"frame {f.frame_id} {f.agent_id} {float(f.timestamp)!r} {len(f)}\n")
            for u, v in f.keypoints:
                fh.write(f"{float(u)!r} {float(v)!r}\n")


def write_provenance(frames, path):
    """Sidecar for evaluation: ``frame <id> <n> qw qx qy qz tx ty tz`` then landmark ids."""
    with open(path, "w") as fh:
        for f in frames:
            pose = f.true_pose.as_array() if f.true_pose is not None else np.full(7, np.nan)
            fh.write(f"frame {f.frame_id} {len(f)} " + " ".join(repr(float(x)) for x in pose) + "\n")
            for lid in f.provenance:
                fh.write(f"{int(lid)}\n")


def _frames_blocks(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    i = 0
    while i < len(lines):
        header = lines[i].split()
        if not header or header[0] != "frame":
            raise ParseError("expected frame header", path, i + 1)
        yield i, header, lines
        i += 1 + int(header[-1] if len(header) == 5 else header[2])


def read_features(path, provenance_path=None):
    frames = []
    prov = {}
    if provenance_path is not None:
        for i, header, lines in _frames_blocks(provenance_path):
            try:
                fid, n = int(header[1]), int(header[2])
                pose_vals = [float(x) for x in header[3:10]]
                ids = [int(lines[i + 1 + k]) for k in range(n)]
            except (ValueError, IndexError) as exc:
                raise ParseError(str(exc), provenance_path, i + 1) from None
            pose = None if np.isnan(pose_vals[0]) else Pose(pose_vals[:4], pose_vals[4:])
            prov[fid] = (np.array(ids, dtype=np.int64), pose)
    for i, header, lines in _frames_blocks(path):
        try:
            fid, aid, t, n = int(header[1]), int(header[2]), float(header[3]), int(header[4])
        except (ValueError, IndexError) as exc:
            raise ParseError(str(exc), path, i + 1) from None
        kp = np.empty((n, 2))
        for k in range(n):
            try:
                u, v = lines[i + 1 + k].split()
                kp[k] = float(u), float(v)
            except (ValueError, IndexError) as exc:
                raise ParseError(f"bad keypoint line: {exc}", path, i + 2 + k) from None
        ids, pose = prov.get(fid, (np.full(n, -1, dtype=np.int64), None))
        frames.append(FrameFeatures(fid, aid, t, kp, ids, pose))
    return frames
