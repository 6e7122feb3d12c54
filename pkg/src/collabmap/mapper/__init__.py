from .bundle import (
    BAOptions,
    BAReport,
    BundleProblem,
    bundle_adjust,
    filter_outliers,
    huber,
    similarity_weights,
)
from .incremental import (
    MapperOptions,
    MatchGraph,
    build_match_graph,
    correspondences_2d3d,
    extend_and_triangulate,
    global_bundle_adjust,
    grow_map,
    initialize_map,
    local_bundle_adjust,
    reconstruct_offline,
    register_frame,
    select_initial_pair,
    start_map,
    verify_matches,
)
from .sparse_map import FrameRecord, Landmark, Observation, SparseMap, write_maps

__all__ = [
    "BAOptions",
    "BAReport",
    "BundleProblem",
    "FrameRecord",
    "Landmark",
    "MapperOptions",
    "MatchGraph",
    "Observation",
    "SparseMap",
    "build_match_graph",
    "bundle_adjust",
    "correspondences_2d3d",
    "extend_and_triangulate",
    "filter_outliers",
    "global_bundle_adjust",
    "grow_map",
    "huber",
    "initialize_map",
    "local_bundle_adjust",
    "reconstruct_offline",
    "register_frame",
    "select_initial_pair",
    "similarity_weights",
    "start_map",
    "verify_matches",
]
