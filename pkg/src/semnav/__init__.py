"""Probabilistic semantic belief mapping and multi-object exploration."""

__version__ = "0.1.0"

from semnav.mapping import (  # noqa: F401
    BeliefMap,
    CellUpdate,
    PosedObservation,
    UpdateModel,
    bayesian_fuse,
    compute_pixel_variances,
    create_map,
    integrate_observation,
    project_and_aggregate,
    query_similarity,
    reset_search_layer,
    spatial_blur,
)
