"""Two drones fly parallel nadir strips; offline SfM rebuilds both tracks in one map.

Run with ``python demos/quickstart.py``. Takes a few seconds.
"""

from collabmap.config import RunConfig
from collabmap.evaluation import classify, report_table
from collabmap.pipelines import run_pipeline, simulate

cfg = RunConfig({"scenario.preset": "co-directed", "run.seed": "0", "run.deterministic": "true",
                 "features.pixel_sigma": "1"})
scn = simulate(cfg)
print(f"world: {len(scn.world)} landmarks; frames per agent: "
      f"{ {a: len(s.frames) for a, s in scn.streams.items()} }")

res = run_pipeline(scn, cfg, "offline")
for m in res.maps:
    print(f"map {m.map_id}: {m.n_registered()} frames, {len(m.landmarks)} landmarks, "
          f"reprojection RMS {m.rms_reprojection():.2f} px")

# Scores come from a similarity fit of the camera centres onto the noisy GNSS track,
# so the 1.5 m GNSS noise sets a floor on the numbers below.
print(report_table([classify(res.estimate, scn.tracks)]))
