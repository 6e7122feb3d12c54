"""Two oblique cameras fly the same strip in opposite directions.

With the matcher limited to 60 degrees of viewpoint change the two agents never
share a verified image pair and end up in separate maps. Raising the limit to
150 degrees lets them merge.
"""

from collabmap.config import RunConfig
from collabmap.evaluation import classify, report_table
from collabmap.pipelines import run_pipeline, simulate

reports = []
for theta in (60, 150):
    cfg = RunConfig({"scenario.preset": "dataset1-like", "features.theta_max": str(theta),
                     "run.seed": "0", "run.deterministic": "true"})
    scn = simulate(cfg)
    for pipeline in ("offline", "otf"):
        res = run_pipeline(scn, cfg, pipeline)
        rep = classify(res.estimate, scn.tracks)
        rep.method = f"{pipeline} theta {theta}"
        reports.append(rep)
        print(f"{rep.method:18s} components {len(res.maps)}  agents in main map {rep.agents_registered}")

print()
print(report_table(reports))
