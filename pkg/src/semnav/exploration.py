"""Sub-map derivation, frontier and cluster goals, and consensus filtering.

Four binary sub-maps drive the search: observed cells, semantically explored
cells (fusion variance below threshold), searched cells (search variance
below threshold, resettable per query), and navigable cells (obstacle-free
after agent-radius inflation). Goals are frontier chains on the explored/
observed boundary and high-similarity clusters in explored-but-unsearched
space; detections are cross-checked against the similarity map percentile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from semnav.mapping import BeliefMap
from semnav.planning import distance_field

_EIGHT = np.ones((3, 3), dtype=bool)

FRONTIER = "frontier"
CLUSTER = "cluster"


@dataclass
class SubMaps:
    """Binary rasters: observed O, explored E, searched C, navigable N."""

    observed: np.ndarray
    explored: np.ndarray
    searched: np.ndarray
    navigable: np.ndarray


@dataclass
class NavGoal:
    kind: str                     # FRONTIER or CLUSTER
    target_cell: tuple[int, int]
    score: float                  # max similarity over the support region
    support: np.ndarray           # (M, 2) cells, row-major order


@dataclass
class Detection:
    label: str
    cell: tuple[int, int]
    confidence: float


class ConsensusDecision(NamedTuple):
    accepted: bool
    reason: str                   # "accepted" | "low-similarity" | "outside-observed"


def inflation_radius_cells(agent_radius: float, resolution: float) -> int:
    """Obstacle inflation radius; floor of one cell keeps diagonals safe."""
    return max(1, int(math.ceil(agent_radius * resolution)))


def _disk(radius: int) -> np.ndarray:
    ax = np.arange(-radius, radius + 1)
    return (ax[:, None] ** 2 + ax[None, :] ** 2) <= radius * radius


def derive_submaps(map_: BeliefMap, tau_e: float, tau_c: float,
                   obstacle_raster: np.ndarray,
                   agent_radius: float = 0.2) -> SubMaps:
    """Threshold the map variances and inflate obstacles.

    O is the observed mask; E = O and sigma2 <= tau_e; C = O and
    sigma2_E <= tau_c; N is the complement of the obstacle raster dilated by
    the agent radius. Thresholds must lie in (0, prior_variance).
    """
    for name, tau in (("tau_e", tau_e), ("tau_c", tau_c)):
        if not 0 < tau < map_.prior_variance:
            raise ValueError(
                f"{name}={tau} outside (0, prior={map_.prior_variance})")
    obstacle = np.asarray(obstacle_raster, dtype=bool)
    if obstacle.shape != map_.observed.shape:
        raise ValueError("obstacle raster shape does not match map grid")
    observed = map_.observed.copy()
    explored = observed & (map_.sigma2 <= tau_e)
    searched = observed & (map_.sigma2_E <= tau_c)
    radius = inflation_radius_cells(agent_radius, map_.resolution)
    blocked = ndimage.binary_dilation(obstacle, structure=_disk(radius))
    return SubMaps(observed=observed, explored=explored, searched=searched,
                   navigable=~blocked)


def extract_frontiers(sub: SubMaps, min_length: int = 3,
                      require_navigable: bool = True,
                      nav_reach_cells: float = 8.0) -> list[np.ndarray]:
    """Frontier chains between explored and merely observed space.

    Returns maximal 8-connected components of explored cells that touch at
    least one observed-but-unexplored cell, each as an (M, 2) array in
    row-major order. Chains shorter than min_length are dropped, as are
    (by default) chains farther than nav_reach_cells from all navigable
    cells; the radius should match the planner's goal snapping so every
    surviving chain is actually approachable. Frontier cells sit on mapped
    surfaces, hence never inside the inflated navigable mask themselves.
    """
    region = sub.observed & ~sub.explored
    if not region.any():
        return []
    boundary = sub.explored & ndimage.binary_dilation(region, structure=_EIGHT)
    if not boundary.any():
        return []
    labels, count = ndimage.label(boundary, structure=_EIGHT)
    nav_dist = None
    if require_navigable:
        if sub.navigable.any():
            nav_dist = ndimage.distance_transform_edt(~sub.navigable)
        else:
            return []
    chains = []
    for i in range(1, count + 1):
        cells = np.argwhere(labels == i)
        if len(cells) < min_length:
            continue
        if (nav_dist is not None
                and nav_dist[cells[:, 0], cells[:, 1]].min() > nav_reach_cells):
            continue
        chains.append(cells)
    return chains


def _region_components(sub: SubMaps):
    region = sub.observed & ~sub.explored
    labels, _ = ndimage.label(region, structure=_EIGHT)
    return region, labels


def _chain_region_mask(chain: np.ndarray, region: np.ndarray,
                       labels: np.ndarray) -> np.ndarray:
    """Cells of the unexplored region 8-connected to the chain."""
    chain_mask = np.zeros_like(region)
    chain_mask[chain[:, 0], chain[:, 1]] = True
    seeds = ndimage.binary_dilation(chain_mask, structure=_EIGHT) & region
    ids = np.unique(labels[seeds])
    ids = ids[ids > 0]
    if ids.size == 0:
        return np.zeros_like(region)
    return np.isin(labels, ids)


def score_frontier(frontier: np.ndarray, s_q: np.ndarray,
                   sub: SubMaps) -> float:
    """Max similarity over the unexplored region reachable from the chain;
    -1 when that region is empty."""
    if len(frontier) == 0:
        raise ValueError("empty frontier")
    return score_frontiers([frontier], s_q, sub)[0]


def score_frontiers(chains: list[np.ndarray], s_q: np.ndarray,
                    sub: SubMaps) -> list[float]:
    """Batched scoring that shares one component-labeling pass."""
    region, labels = _region_components(sub)
    scores = []
    for chain in chains:
        mask = _chain_region_mask(chain, region, labels)
        scores.append(float(s_q[mask].max()) if mask.any() else -1.0)
    return scores


def _near_navigable(nav: np.ndarray, cell, radius: int) -> list:
    n_x, n_y = nav.shape
    x, y = int(cell[0]), int(cell[1])
    out = []
    for cx in range(max(0, x - radius), min(n_x, x + radius + 1)):
        for cy in range(max(0, y - radius), min(n_y, y + radius + 1)):
            if nav[cx, cy] and (cx - x) ** 2 + (cy - y) ** 2 <= radius ** 2:
                out.append((cx, cy))
    return out


def make_frontier_goal(frontier: np.ndarray, s_q: np.ndarray, sub: SubMaps,
                       anchor_radius: int = 3) -> NavGoal:
    """Score a chain and pick its navigation target cell.

    The target is the chain cell nearest, in geodesic distance over the
    navigable mask, to the region argmax (both anchored to their nearby
    navigable cells within anchor_radius); falls back to Euclidean distance
    and row-major order when no navigable anchor exists.
    """
    region, labels = _region_components(sub)
    mask = _chain_region_mask(frontier, region, labels)
    if not mask.any():
        return NavGoal(kind=FRONTIER, target_cell=tuple(frontier[0]),
                       score=-1.0, support=frontier)
    cells = np.argwhere(mask)
    vals = s_q[cells[:, 0], cells[:, 1]]
    best = cells[int(np.argmax(vals))]
    score = float(vals.max())

    nav = sub.navigable
    seeds = _near_navigable(nav, best, anchor_radius)
    target = None
    if seeds:
        field = distance_field(nav, seeds)
        best_key = None
        for x, y in frontier:
            anchors = _near_navigable(nav, (x, y), anchor_radius)
            d = min((field[a] for a in anchors), default=np.inf)
            if not np.isfinite(d):
                continue
            key = (d, int(x), int(y))
            if best_key is None or key < best_key:
                best_key = key
                target = (int(x), int(y))
    if target is None:
        d2 = ((frontier[:, 0] - best[0]) ** 2
              + (frontier[:, 1] - best[1]) ** 2)
        target = tuple(int(v) for v in frontier[int(np.argmin(d2))])
    return NavGoal(kind=FRONTIER, target_cell=target, score=score,
                   support=frontier)


def cluster_high_similarity(s_q: np.ndarray, sub: SubMaps,
                            tau_sim: float) -> list[NavGoal]:
    """Cluster goals: components of explored-but-unsearched cells with
    similarity >= tau_sim; target is the argmax cell (row-major ties)."""
    if not -1.0 < tau_sim < 1.0:
        raise ValueError(f"tau_sim={tau_sim} outside (-1, 1)")
    mask = sub.explored & ~sub.searched & (s_q >= tau_sim)
    if not mask.any():
        return []
    labels, count = ndimage.label(mask, structure=_EIGHT)
    goals = []
    for i in range(1, count + 1):
        cells = np.argwhere(labels == i)
        vals = s_q[cells[:, 0], cells[:, 1]]
        k = int(np.argmax(vals))
        goals.append(NavGoal(
            kind=CLUSTER,
            target_cell=(int(cells[k, 0]), int(cells[k, 1])),
            score=float(vals[k]),
            support=cells,
        ))
    return goals


def select_goal(frontier_goals: list[NavGoal],
                cluster_goals: list[NavGoal]) -> NavGoal | None:
    """Greedy argmax over all goals; ties break frontier-before-cluster,
    then lowest row-major target cell. None when both lists are empty."""
    candidates = list(frontier_goals) + list(cluster_goals)
    if not candidates:
        return None
    return min(candidates, key=lambda g: (
        -g.score, 0 if g.kind == FRONTIER else 1, g.target_cell))


def consensus_filter(det: Detection, s_q: np.ndarray, sub: SubMaps,
                     percentile: float = 5.0) -> ConsensusDecision:
    """Accept a detection only where map similarity is in the top percentile.

    The threshold is the (100 - percentile)th percentile of similarity over
    observed cells; detections outside the observed map are rejected with
    their own reason code.
    """
    if not 0 < percentile < 100:
        raise ValueError(f"percentile={percentile} outside (0, 100)")
    x, y = det.cell
    n_x, n_y = s_q.shape
    if not (0 <= x < n_x and 0 <= y < n_y) or not sub.observed[x, y]:
        return ConsensusDecision(False, "outside-observed")
    threshold = np.percentile(s_q[sub.observed], 100.0 - percentile)
    if s_q[x, y] >= threshold:
        return ConsensusDecision(True, "accepted")
    return ConsensusDecision(False, "low-similarity")
