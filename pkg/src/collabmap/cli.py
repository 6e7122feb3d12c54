"""``collabmap`` command line: simulate scenarios, run pipelines, evaluate trajectories.

Output directory layout::

    manifest.txt   resolved config, input hashes, output hashes
    streams/       world, per-agent features, provenance, GNSS and true positions
    maps/          sparse map export of the last run
    traj/          one trajectory file per agent
    reports/       run.log, report.csv, report.txt

Exit codes: 0 success, 2 configuration error, 3 pipeline error, 4 evaluation error.

Every tunable is a dotted configuration key, settable in a ``key = value`` file
(``--config``) or with ``--set key=value``:

"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from .config import KEYS, PIPELINES, PLAN_FIELDS, RunConfig, parse_overrides
from .errors import CollabMapError, InvalidConfig, ManifestMismatch
from .evaluation import classify, load_estimate, read_gnss, report_csv, report_table
from .pipelines import (
    RUNNERS,
    load_scenario,
    mode_for,
    read_manifest,
    sha256_file,
    simulate,
    write_manifest,
    write_outputs,
    write_scenario,
)

__doc__ += "\n".join(f"    {k}" for k in sorted(KEYS)) + "\n    plan.<agent>.{" + ",".join(PLAN_FIELDS) + "}\n"

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_EVAL = 0, 2, 3, 4

log = logging.getLogger("collabmap")

# keys the streams depend on; they cannot change between ``simulate`` and ``run``
_STREAM_PREFIXES = ("scenario.", "world.", "features.", "mission.", "plan.")


class _Fail(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _flags(args) -> dict:
    raw = {}
    if getattr(args, "preset", None):
        raw["scenario.preset"] = args.preset
    if getattr(args, "seed", None) is not None:
        raw["run.seed"] = str(args.seed)
    if getattr(args, "deterministic", False):
        raw["run.deterministic"] = "true"
    if getattr(args, "pipeline", None):
        raw["run.pipeline"] = args.pipeline
    return raw


def _fresh_config(args) -> RunConfig:
    try:
        return RunConfig.load(args.config, {**_flags(args), **parse_overrides(args.set)})
    except OSError as e:
        raise _Fail(EXIT_CONFIG, f"cannot read config: {e}") from None


def _has_manifest(out) -> bool:
    return os.path.exists(os.path.join(out, "manifest.txt"))


def _stream_key(k: str) -> bool:
    return k.startswith(_STREAM_PREFIXES) or k == "run.seed"


def _run_config(args, manifest_config: dict) -> RunConfig:
    """Manifest config overlaid with this invocation's flags; stream keys must not change."""
    extra = dict(_flags(args))
    if args.config:
        extra.update(RunConfig.load(args.config).raw)
    extra.update(parse_overrides(args.set))
    base = RunConfig(manifest_config)
    for k, v in extra.items():
        if _stream_key(k) and RunConfig({k: v}).get(k) != base.get(k):
            raise InvalidConfig("differs from the simulated scenario; re-run simulate", k)
    return base.with_overrides(extra)


def _logfile(out):
    os.makedirs(os.path.join(out, "reports"), exist_ok=True)
    h = logging.FileHandler(os.path.join(out, "reports", "run.log"), mode="w")
    h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    return h


# -- subcommands ------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    """Generate a world and per-agent feature streams into ``<out>/streams``."""
    cfg = _fresh_config(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    scn = simulate(cfg)
    files = write_scenario(scn, cfg, out)
    n = {a: len(s.frames) for a, s in scn.streams.items()}
    print(f"simulated {len(scn.world.landmarks)} landmarks, {scn.mode} mode, frames per agent {n}")
    print(f"wrote {len(files)} stream files and manifest.txt to {out}")
    return EXIT_OK


def _prepare(args):
    """Scenario and run config for ``run``: from an existing manifest, else simulate first."""
    out = args.out
    if _has_manifest(out):
        config, _, _, previous = read_manifest(out, with_outputs=True)
        cfg = _run_config(args, config)
        try:
            scn, _ = load_scenario(out)
        except ManifestMismatch as e:
            raise _Fail(EXIT_PIPELINE, f"load: {e}") from None
        if scn.mode != mode_for(cfg.pipeline):
            raise InvalidConfig(f"streams were simulated in {scn.mode} mode; "
                                f"{cfg.pipeline} needs {mode_for(cfg.pipeline)} mode", "run.pipeline")
        return scn, cfg, previous
    if not (args.preset or args.config or args.set):
        raise _Fail(EXIT_PIPELINE, f"load: no manifest in {out} (run simulate first or pass --preset)")
    cfg = _fresh_config(args)
    os.makedirs(out, exist_ok=True)
    scn = simulate(cfg)
    write_scenario(scn, cfg, out)
    return scn, cfg, {}


def _pin_interleaving(cfg: RunConfig) -> RunConfig:
    """Live runs draw an interleaving seed once and record it, so the manifest replays them."""
    if cfg.get("run.deterministic") or cfg.get("run.interleave_seed") is not None:
        return cfg
    return cfg.with_overrides({"run.interleave_seed": str(int.from_bytes(os.urandom(4), "little"))})


def run_in(args) -> tuple:
    scn, cfg, previous = _prepare(args)
    cfg = _pin_interleaving(cfg)
    out = args.out
    handler = _logfile(out)
    log.addHandler(handler)
    try:
        log.info("pipeline %s, seed %d, deterministic %s", cfg.pipeline, cfg.seed, cfg.get("run.deterministic"))
        t0 = time.perf_counter()
        try:
            res = RUNNERS[cfg.pipeline](scn, cfg)
        except CollabMapError as e:
            log.error("stage %s: %s", cfg.pipeline, e)
            raise _Fail(EXIT_PIPELINE, f"{cfg.pipeline}: {type(e).__name__}: {e}") from None
        for stage, dt in res.timings.items():
            log.info("timing %s %.3f s", stage, dt)
        log.info("timing total %.3f s", time.perf_counter() - t0)
        for m in res.maps:
            agents = sorted({m.frames[f].agent_id for f in m.registered_ids})
            log.info("map %s: %d frames, %d landmarks, agents %s", m.map_id, m.n_registered(),
                     len(m.landmarks), agents)
        outputs = write_outputs(res, out)
        _, artifacts, mode = read_manifest(out)
        write_manifest(cfg, out, sorted(artifacts), mode, outputs)
        same = previous and all(previous.get(f) == sha256_file(os.path.join(out, f)) for f in outputs)
        if previous and cfg.get("run.deterministic"):
            log.info("outputs %s the previous run recorded in the manifest", "reproduce" if same else "differ from")
    finally:
        log.removeHandler(handler)
        handler.close()
    return res, cfg


def cmd_run(args) -> int:
    """Run a pipeline on the streams in ``<out>`` (simulating them first if absent)."""
    res, cfg = run_in(args)
    est = res.estimate
    print(f"{res.method}: {len(res.maps)} map component(s), "
          f"registered {sum(len(v) for v in est.poses.values())} frames over agents {sorted(est.poses)}")
    print(f"trajectories in {os.path.join(args.out, 'traj')}")
    return EXIT_OK


def evaluate_dir(out, cfg: RunConfig | None = None, method: str | None = None):
    """EvalReport for the trajectories in ``out/traj`` against ``out/streams`` GNSS files."""
    if cfg is None:
        cfg = RunConfig(read_manifest(out)[0]) if _has_manifest(out) else RunConfig()
    sdir, tdir = os.path.join(out, "streams"), os.path.join(out, "traj")
    if not os.path.isdir(sdir):
        raise _Fail(EXIT_EVAL, f"no streams directory in {out}")
    gt, n_frames = {}, {}
    for name in sorted(os.listdir(sdir)):
        if not name.endswith(".gnss"):
            continue
        base = os.path.join(sdir, name[: -len(".gnss")])
        true = base + ".true"
        gt.update(read_gnss(base + ".gnss", true if os.path.exists(true) else None))
        if os.path.exists(base + ".features"):
            aid = int(name[: -len(".gnss")].rsplit("_", 1)[1])
            with open(base + ".features") as fh:
                n_frames[aid] = sum(1 for line in fh if line.startswith("frame "))
    if not gt:
        raise _Fail(EXIT_EVAL, f"no GNSS files in {sdir}")
    trajs = sorted(os.path.join(tdir, f) for f in os.listdir(tdir) if f.endswith(".traj")) if os.path.isdir(tdir) else []
    est = load_estimate(trajs, method or cfg.pipeline, n_frames)
    return classify(est, gt, cfg.eval_options())


def _write_reports(out, reports):
    rdir = os.path.join(out, "reports")
    os.makedirs(rdir, exist_ok=True)
    csv_text, table = report_csv(reports), report_table(reports)
    with open(os.path.join(rdir, "report.csv"), "w") as fh:
        fh.write(csv_text)
    with open(os.path.join(rdir, "report.txt"), "w") as fh:
        fh.write(table)
    return table


def cmd_evaluate(args) -> int:
    """Score ``<out>/traj`` against GNSS and write the reports."""
    out = args.out
    try:
        cfg = _run_config(args, read_manifest(out)[0]) if _has_manifest(out) else _fresh_config(args)
    except ManifestMismatch as e:
        raise _Fail(EXIT_EVAL, str(e)) from None
    try:
        rep = evaluate_dir(out, cfg, args.pipeline)
    except (CollabMapError, OSError, ValueError) as e:
        if isinstance(e, InvalidConfig):
            raise
        raise _Fail(EXIT_EVAL, f"{type(e).__name__}: {e}") from None
    print(_write_reports(out, [rep]), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    """All pipelines on one scenario, each in ``<out>/<pipeline>``; combined reports in ``<out>``."""
    pipelines = args.pipeline.split(",") if args.pipeline else list(PIPELINES)
    for p in pipelines:
        if p not in PIPELINES:
            raise InvalidConfig(f"unknown pipeline {p!r}", "run.pipeline")
    base = _fresh_config(argparse.Namespace(**{**vars(args), "pipeline": None}))
    reports, failed = [], []
    for p in pipelines:
        sub = argparse.Namespace(**{**vars(args), "pipeline": p, "out": os.path.join(args.out, p)})
        if not _has_manifest(sub.out):
            os.makedirs(sub.out, exist_ok=True)
            cfg = base.with_overrides({"run.pipeline": p})
            write_scenario(simulate(cfg), cfg, sub.out)
        sub.preset = sub.config = None
        sub.set = [s for s in (args.set or []) if not _stream_key(s.split("=", 1)[0].strip())]
        sub.seed = None
        try:
            run_in(sub)
        except _Fail as e:
            print(f"{p}: {e}", file=sys.stderr)
            failed.append(p)
            continue
        reports.append(evaluate_dir(sub.out, method=p))
    if reports:
        print(_write_reports(args.out, reports), end="")
        write_manifest(base, args.out, [f"{p}/manifest.txt" for p in pipelines if p not in failed], "sweep")
    return EXIT_PIPELINE if failed else EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", help="scenario preset (scenario.preset)")
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="master seed (run.seed)")
    common.add_argument("--deterministic", action="store_true", help="serialized timestamp order (needs a seed)")
    common.add_argument("--pipeline", help="offline, otf or slam; for sweep a comma list")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="collabmap", description=__doc__.split("\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).split("\n")[0])
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    err = logging.StreamHandler()
    err.setLevel(logging.INFO if args.verbose else logging.WARNING)
    err.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [err]
    log.setLevel(logging.INFO)
    log.propagate = False
    if args.command != "sweep" and args.pipeline and args.pipeline not in PIPELINES:
        print(f"error: run.pipeline: unknown pipeline {args.pipeline!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except InvalidConfig as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except _Fail as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except CollabMapError as e:
        code = EXIT_EVAL if args.command == "evaluate" else EXIT_PIPELINE
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
