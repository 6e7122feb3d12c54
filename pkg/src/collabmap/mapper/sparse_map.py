"""Sparse map container: posed frames, tie points and their observations."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, Pose, project_points


@dataclass
class Landmark:
    id: int
    position: np.ndarray
    observations: dict = field(default_factory=dict)  # frame_id -> keypoint index


@dataclass(frozen=True)
class Observation:
    frame_id: int
    landmark_id: int
    pixel: np.ndarray


@dataclass
class FrameRecord:
    frame_id: int
    agent_id: int
    timestamp: float
    keypoints: np.ndarray
    K: CameraIntrinsics
    pose: Pose | None = None
    registered: bool = False
    kp_landmark: np.ndarray = None  # landmark id per keypoint, -1 if none

    def __post_init__(self):
        if self.kp_landmark is None:
            self.kp_landmark = np.full(len(self.keypoints), -1, dtype=np.int64)


class SparseMap:
    def __init__(self, map_id: int = 0):
        self.map_id = map_id
        self.frames: dict[int, FrameRecord] = {}
        self.landmarks: dict[int, Landmark] = {}
        self.fixed_gauge: tuple | None = None
        self._next_landmark = 0

    # -- frames ---------------------------------------------------------------------
    def add_frame(self, view, K: CameraIntrinsics) -> FrameRecord:
        if view.frame_id in self.frames:
            return self.frames[view.frame_id]
        rec = FrameRecord(view.frame_id, view.agent_id, float(view.timestamp),
                          np.asarray(view.keypoints, dtype=float), K)
        self.frames[view.frame_id] = rec
        return rec

    def register(self, frame_id: int, pose: Pose):
        rec = self.frames[frame_id]
        rec.pose = pose
        rec.registered = True

    @property
    def registered_ids(self) -> list:
        return sorted(fid for fid, r in self.frames.items() if r.registered)

    def n_registered(self) -> int:
        return sum(r.registered for r in self.frames.values())

    def poses(self) -> dict:
        return {fid: r.pose for fid, r in self.frames.items() if r.registered}

    # -- landmarks ------------------------------------------------------------------
    def new_landmark(self, position, observations: dict) -> int:
        lid = self._next_landmark
        self._next_landmark += 1
        lm = Landmark(lid, np.asarray(position, dtype=float), {})
        self.landmarks[lid] = lm
        for fid, kp in observations.items():
            self.add_observation(lid, fid, kp)
        return lid

    def add_observation(self, lid: int, frame_id: int, kp: int):
        rec = self.frames[frame_id]
        lm = self.landmarks[lid]
        if frame_id in lm.observations or rec.kp_landmark[kp] >= 0:
            raise ValueError("keypoint or frame already observes a landmark")
        lm.observations[frame_id] = int(kp)
        rec.kp_landmark[kp] = lid

    def remove_observation(self, lid: int, frame_id: int):
        lm = self.landmarks[lid]
        kp = lm.observations.pop(frame_id)
        self.frames[frame_id].kp_landmark[kp] = -1

    def remove_landmark(self, lid: int):
        lm = self.landmarks.pop(lid)
        for fid, kp in lm.observations.items():
            self.frames[fid].kp_landmark[kp] = -1

    def merge_landmarks(self, keep: int, drop: int) -> bool:
        """Move observations of ``drop`` onto ``keep``; conflicting frames are skipped."""
        a, b = self.landmarks[keep], self.landmarks[drop]
        self.remove_landmark(drop)
        for fid, kp in b.observations.items():
            if fid not in a.observations and self.frames[fid].kp_landmark[kp] < 0:
                self.add_observation(keep, fid, kp)
        return True

    @property
    def observations(self) -> list:
        out = []
        for lid, lm in self.landmarks.items():
            for fid, kp in lm.observations.items():
                out.append(Observation(fid, lid, self.frames[fid].keypoints[kp]))
        return out

    def n_observations(self) -> int:
        return sum(len(lm.observations) for lm in self.landmarks.values())

    def frame_landmarks(self, frame_id: int):
        """(keypoint indices, landmark ids) of a frame's mapped keypoints."""
        kl = self.frames[frame_id].kp_landmark
        idx = np.flatnonzero(kl >= 0)
        return idx, kl[idx]

    def covisibility(self, frame_id: int) -> dict:
        counts = {}
        _, lids = self.frame_landmarks(frame_id)
        for lid in lids:
            for other in self.landmarks[lid].observations:
                if other != frame_id:
                    counts[other] = counts.get(other, 0) + 1
        return counts

    def positions(self, lids) -> np.ndarray:
        return np.array([self.landmarks[int(l)].position for l in lids]).reshape(-1, 3)

    # -- bookkeeping ----------------------------------------------------------------
    def copy(self) -> "SparseMap":
        return copy.deepcopy(self)

    def reprojection_errors(self):
        """Per-observation (frame ids, landmark ids, pixel errors)."""
        fids, lids, errs = [], [], []
        by_frame = {}
        for lid, lm in self.landmarks.items():
            for fid, kp in lm.observations.items():
                by_frame.setdefault(fid, []).append((lid, kp))
        for fid in sorted(by_frame):
            rec = self.frames[fid]
            items = by_frame[fid]
            ids = np.array([i for i, _ in items], dtype=np.int64)
            kps = np.array([k for _, k in items], dtype=np.int64)
            uv, z = project_points(self.positions(ids), rec.pose, rec.K)
            e = np.linalg.norm(uv - rec.keypoints[kps], axis=1)
            e[~(z > 0)] = np.inf
            fids.append(np.full(len(ids), fid))
            lids.append(ids)
            errs.append(e)
        if not fids:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
        return np.concatenate(fids), np.concatenate(lids), np.concatenate(errs)

    def rms_reprojection(self) -> float:
        _, _, e = self.reprojection_errors()
        return float(np.sqrt(np.mean(e**2))) if len(e) else 0.0

    def transform(self, s: float, R: np.ndarray, t: np.ndarray):
        """Apply the world similarity X -> s R X + t to every pose and landmark."""
        for rec in self.frames.values():
            if rec.pose is not None:
                C = s * R @ rec.pose.center + t
                rec.pose = Pose.from_center(rec.pose.R @ R.T, C)
        for lm in self.landmarks.values():
            lm.position = s * R @ lm.position + t

    def audit(self) -> list:
        """List of invariant violations (empty when the map is consistent)."""
        problems = []
        for lid, lm in self.landmarks.items():
            if len(lm.observations) < 2:
                problems.append(f"landmark {lid} has {len(lm.observations)} observations")
            if not np.all(np.isfinite(lm.position)):
                problems.append(f"landmark {lid} position not finite")
            for fid, kp in lm.observations.items():
                rec = self.frames.get(fid)
                if rec is None or not rec.registered:
                    problems.append(f"landmark {lid} observed by unregistered frame {fid}")
                    continue
                if rec.kp_landmark[kp] != lid:
                    problems.append(f"frame {fid} keypoint {kp} back-reference broken")
                if rec.pose.transform(lm.position)[2] <= 0:
                    problems.append(f"landmark {lid} behind frame {fid}")
        for fid, rec in self.frames.items():
            for kp in np.flatnonzero(rec.kp_landmark >= 0):
                lid = int(rec.kp_landmark[kp])
                if lid not in self.landmarks or self.landmarks[lid].observations.get(fid) != kp:
                    problems.append(f"frame {fid} keypoint {kp} points to missing observation")
        if self.fixed_gauge is not None:
            for fid in self.fixed_gauge:
                if fid not in self.frames or not self.frames[fid].registered:
                    problems.append(f"gauge frame {fid} not registered")
        return problems

    def export_lines(self) -> list:
        lines = []
        for fid in self.registered_ids:
            rec = self.frames[fid]
            q, t = rec.pose.rotation, rec.pose.translation
            vals = " ".join(f"{v:.17g}" for v in (*q, *t))
            lines.append(f"frame {fid} {rec.agent_id} {rec.timestamp:.17g} {vals}")
        for lid in sorted(self.landmarks):
            lm = self.landmarks[lid]
            x, y, z = lm.position
            lines.append(f"pt {lid} {x:.17g} {y:.17g} {z:.17g} {len(lm.observations)}")
        return lines


def write_maps(maps, path):
    with open(path, "w") as fh:
        for m in maps:
            fh.write(f"# map {m.map_id}\n")
            for line in m.export_lines():
                fh.write(line + "\n")
