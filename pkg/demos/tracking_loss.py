"""A single drone turns 90 degrees on the spot halfway through its flight.

The SLAM agent tracks frame to frame, so the sudden turn leaves it with too few
known landmarks in view and it reports itself lost. Offline SfM matches every
image against every other and registers the whole flight.
Takes about half a minute (the SLAM stream is 30 Hz).
"""

from collabmap.config import RunConfig
from collabmap.evaluation import classify
from collabmap.pipelines import run_pipeline, simulate

base = {"scenario.preset": "yaw-loss", "run.seed": "0", "run.deterministic": "true"}

for pipeline in ("slam", "offline"):
    cfg = RunConfig({**base, "run.pipeline": pipeline})
    scn = simulate(cfg)
    res = run_pipeline(scn, cfg)
    row = classify(res.estimate, scn.tracks).agents[0]
    print(f"{pipeline:8s} status {row.status:12s} completeness {row.completeness:.2f}")
    if pipeline == "slam":
        agent = res.agents[1]
        print(f"         agent state {agent.state}; "
              f"{sum(1 for _ in agent.trajectory())} of {len(agent.processed)} frames tracked")
