"""Run configuration: ``key = value`` files with dotted keys and ``--set`` overrides.

Every tunable resolves to one flat key. Plans use ``plan.<agent>.<field>``;
any other key must appear in :data:`KEYS`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .agent import AgentConfig
from .collab import ServerConfig
from .errors import InvalidConfig, InvalidPlan, ParseError, UnknownPreset
from .evaluation import EvalOptions
from .features import FeatureModel
from .mapper import BAOptions, MapperOptions
from .scenario import PRESETS, SIGMA_GNSS, FlightPlan, WorldConfig, YawManeuver, preset_config

PIPELINES = ("offline", "otf", "slam")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str):
    return None if s.strip().lower() in ("inf", "none", "all") else int(s)


def _choice(*options):
    def conv(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return conv


def _preset_name(s: str) -> str:
    if s != "none" and s not in PRESETS:
        raise ValueError(f"unknown preset; choose from {', '.join(sorted(PRESETS))} or none")
    return s


def _extent(s: str):
    v = [float(x) for x in s.replace(",", " ").split()]
    if len(v) == 1:
        return (0.0, v[0], 0.0, v[0])
    if len(v) != 4:
        raise ValueError("extent is 'L' or 'x0 x1 y0 y1'")
    return tuple(v)


def _disconnect(s: str) -> dict:
    """``"1:300, 2:450"`` -> {agent: frame count}."""
    out = {}
    for item in s.replace(";", ",").split(","):
        if item.strip():
            a, n = item.split(":")
            out[int(a)] = int(n)
    return out


# key -> (converter, default); None defaults mean "take the preset/library default"
KEYS = {
    "run.seed": (int, None),
    "run.deterministic": (_bool, False),
    "run.pipeline": (_choice(*PIPELINES), "offline"),
    "run.interleave_seed": (int, None),
    "run.disconnect": (_disconnect, None),
    "run.end_after": (_disconnect, None),
    "scenario.preset": (_preset_name, "co-directed"),
    "mission.sigma_gnss": (float, SIGMA_GNSS),
    "world.extent": (_extent, None),
    "world.density": (float, None),
    "world.count": (_opt_int, None),
    "world.h_noise": (float, None),
    "world.repetitive_fraction": (float, None),
    "world.group_size": (int, None),
    "features.theta_max": (float, 60.0),
    "features.p_detect": (float, 1.0),
    "features.pixel_sigma": (float, 0.0),
    "features.outlier_rate": (float, 0.0),
    "features.repetitive_confusion": (float, 0.0),
    "mapper.theta_min_deg": (float, None),
    "mapper.tau_px": (float, None),
    "mapper.filter_px": (float, None),
    "mapper.min_pnp_inliers": (int, None),
    "mapper.min_edge_inliers": (int, None),
    "mapper.local_ba_window": (int, None),
    "mapper.global_ba_every": (int, None),
    "mapper.local_ba_iterations": (int, None),
    "ba.max_iterations": (int, None),
    "ba.huber_delta": (float, None),
    "ba.weight_mode": (_choice("uniform", "similarity"), None),
    "ba.convergence_tol": (float, None),
    "collab.retrieval_k": (_opt_int, 10),
    "collab.n_merge": (int, 3),
    "collab.s_pr": (float, 0.15),
    "collab.weighted_ba": (_bool, True),
    "agent.T_lost": (int, None),
    "agent.keyframe_ratio": (float, None),
    "agent.keyframe_max_gap": (int, None),
    "agent.frame_rate": (float, None),
    "agent.track_px": (float, None),
    "eval.d_max": (float, None),
    "eval.extent_ratio_min": (float, None),
    "eval.lost_partial_below": (float, None),
    "eval.window_s": (float, None),
    "eval.reference": (_choice("gnss", "true"), None),
}

PLAN_FIELDS = {
    "waypoints": lambda s: np.array([[float(x) for x in p.replace(",", " ").split()] for p in s.split(";") if p.strip()]),
    "altitude": float,
    "speed": float,
    "heading": _choice("along-track", "fixed"),
    "heading_deg": float,
    "pitch": float,
    "yaw": lambda s: [YawManeuver(*[float(x) for x in p.replace(",", " ").split()]) for p in s.split(";") if p.strip()],
    "frame_rate": float,
    "start_time": float,
}
_PLAN_KEY = re.compile(r"^plan\.(\d+)\.([a-z_]+)$")


def parse_text(text: str, path=None) -> dict:
    """``key = value`` lines (``#`` comments) -> ordered dict of raw strings."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value': {raw.strip()!r}", path, n)
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ParseError("empty key", path, n)
        out[key] = value
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not key=value", item)
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)  # explicitly set keys (strings)

    def __post_init__(self):
        self.values = {}
        self.plan_values = {}
        for key, s in self.raw.items():
            m = _PLAN_KEY.match(key)
            if m:
                aid, fld = int(m.group(1)), m.group(2)
                if fld not in PLAN_FIELDS:
                    raise InvalidConfig(f"unknown plan field {fld!r}", key)
                self.plan_values.setdefault(aid, {})[fld] = _convert(PLAN_FIELDS[fld], s, key)
                continue
            if key not in KEYS:
                raise InvalidConfig("unknown configuration key", key)
            self.values[key] = _convert(KEYS[key][0], s, key)
        if self.get("run.deterministic") and self.get("run.seed") is None:
            raise InvalidConfig("a seed is required in deterministic mode", "run.seed")

    @classmethod
    def load(cls, path=None, overrides: dict | None = None, **flags) -> "RunConfig":
        raw = {}
        if path is not None:
            with open(path) as fh:
                raw.update(parse_text(fh.read(), path))
        raw.update({k: v for k, v in flags.items() if v is not None})
        raw.update(overrides or {})
        return cls(raw)

    def get(self, key):
        if key in self.values:
            return self.values[key]
        return KEYS[key][1]

    @property
    def seed(self) -> int:
        s = self.get("run.seed")
        return 0 if s is None else s

    @property
    def pipeline(self) -> str:
        return self.get("run.pipeline")

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return RunConfig({**self.raw, **overrides})

    def resolved_lines(self) -> list:
        """Every key with its effective value, sorted; the manifest body."""
        lines = []
        for key in sorted(KEYS):
            v = self.get(key)
            if key in self.values and v is None:
                lines.append(f"{key} = inf")
            elif v is not None:
                lines.append(f"{key} = {_fmt(v)}")
        for aid in sorted(self.plan_values):
            for fld in sorted(self.plan_values[aid]):
                lines.append(f"plan.{aid}.{fld} = {self.raw[f'plan.{aid}.{fld}']}")
        return lines

    # -- typed views --------------------------------------------------------------------
    def _section(self, prefix) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def world_and_plans(self):
        name = self.get("scenario.preset")
        if name == "none":
            wc, plans = WorldConfig(), []
        else:
            try:
                wc, plans = preset_config(name)
            except UnknownPreset as e:
                raise InvalidConfig(str(e), "scenario.preset") from None
        wc = replace(wc, **self._section("world"))
        by_id = {p.agent_id: p for p in plans}
        for aid, fields in sorted(self.plan_values.items()):
            kw = {}
            for fld, v in fields.items():
                if fld == "heading":
                    kw["heading_mode"] = v
                elif fld == "heading_deg":
                    kw["heading"] = v
                elif fld == "yaw":
                    kw["yaw_maneuvers"] = v
                else:
                    kw[fld] = v
            try:
                if aid in by_id:
                    by_id[aid] = replace(by_id[aid], **kw)
                else:
                    if "waypoints" not in kw:
                        raise InvalidConfig("new plan needs waypoints", f"plan.{aid}.waypoints")
                    by_id[aid] = FlightPlan(aid, **kw)
            except InvalidPlan as e:
                raise InvalidConfig(str(e), f"plan.{aid}") from None
        if not by_id:
            raise InvalidConfig("no flight plans configured", "plan")
        return wc, [by_id[a] for a in sorted(by_id)]

    def feature_model(self) -> FeatureModel:
        try:
            return FeatureModel(**self._section("features"))
        except ValueError as e:
            raise InvalidConfig(str(e), "features") from None

    def mapper_options(self) -> MapperOptions:
        try:
            ba = BAOptions(**self._section("ba"))
            return MapperOptions(ba=ba, seed=self.seed, **self._section("mapper"))
        except ValueError as e:
            raise InvalidConfig(str(e), "mapper") from None

    def server_config(self) -> ServerConfig:
        c = self._section("collab")
        try:
            return ServerConfig(retrieval_k=self.get("collab.retrieval_k"), n_merge=self.get("collab.n_merge"),
                                s_pr=self.get("collab.s_pr"), weighted_ba=self.get("collab.weighted_ba"),
                                mapper=self.mapper_options(), seed=self.seed)
        except ValueError as e:
            raise InvalidConfig(str(e), "collab" if not c else f"collab.{sorted(c)[0]}") from None

    def agent_config(self) -> AgentConfig:
        try:
            return AgentConfig(mapper=self.mapper_options(), **self._section("agent"))
        except ValueError as e:
            raise InvalidConfig(str(e), "agent") from None

    def eval_options(self) -> EvalOptions:
        try:
            return EvalOptions(**self._section("eval"))
        except ValueError as e:
            raise InvalidConfig(str(e), "eval") from None


def _convert(conv, s, key):
    try:
        return conv(s)
    except (ValueError, TypeError) as e:
        raise InvalidConfig(f"invalid value {s!r}: {e}", key) from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, dict):
        return ", ".join(f"{k}:{x}" for k, x in sorted(v.items()))
    if isinstance(v, tuple):
        return " ".join(f"{x:g}" for x in v)
    return str(v)
