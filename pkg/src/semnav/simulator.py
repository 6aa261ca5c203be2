"""Deterministic 2D raycasting environment with rooms, objects, and a
simulated detector.

Worlds are boolean occupancy grids (walls and objects are opaque) with a
semantic label per occupied cell. Observations are single scanlines of exact
grid-traversal ray distances; the agent follows planned paths with a fixed
step size. Everything is reproducible from seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from semnav.exploration import Detection
from semnav.mapping import PosedObservation
from semnav.planning import Path

VOID_LABEL = "void"


class GenerationError(RuntimeError):
    """World or episode generation could not satisfy its constraints."""


class InvalidPose(ValueError):
    pass


@dataclass
class WorldObject:
    label: str
    cells: np.ndarray            # (K, 2) occupied cells
    centroid: tuple[float, float]  # [m]


@dataclass
class World:
    occupancy: np.ndarray        # (n_x, n_y) bool, True = opaque
    semantic: np.ndarray         # (n_x, n_y) int16 label ids, 0 = void
    labels: list[str]            # id -> label, labels[0] == "void"
    objects: list[WorldObject]
    cell_size: float             # [m]
    seed: int

    @property
    def n_x(self) -> int:
        return self.occupancy.shape[0]

    @property
    def n_y(self) -> int:
        return self.occupancy.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        return (self.n_x * self.cell_size, self.n_y * self.cell_size)

    @property
    def navigable(self) -> np.ndarray:
        return ~self.occupancy

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor(x / self.cell_size)),
                int(math.floor(y / self.cell_size)))

    def instances_of(self, label: str) -> list[WorldObject]:
        return [o for o in self.objects if o.label == label]

    def categories(self) -> list[str]:
        return sorted({o.label for o in self.objects})


@dataclass
class WorldGenParams:
    extent: float = 16.0             # square world side [m]
    cells_per_meter: float = 5.0
    n_rooms: int = 4
    room_min: float = 3.0            # room side [m]
    room_max: float = 6.0
    corridor_width: int = 3          # [cells]
    categories: tuple[str, ...] = ("chair", "table", "bed", "toilet",
                                   "sofa", "plant", "sink", "tv")
    instances_per_category: int = 1
    object_cells: int = 2            # object side [cells]
    co_location_groups: tuple[tuple[str, ...], ...] = ()
    co_location_bias: float = 0.8


@dataclass
class AgentState:
    pose: tuple[float, float, float]   # x [m], y [m], heading [rad]
    steps_taken: int = 0
    path_length: float = 0.0


@dataclass
class RayCast:
    """Raw ray traversal result backing one observation."""

    depth: np.ndarray        # (W,) entry distance of the hit cell [m]
    valid: np.ndarray        # (W,) False where censored at max_range
    hit_cells: np.ndarray    # (W, 2) int, -1 rows where censored
    free_cells: np.ndarray   # (M, 2) unique traversed free cells


@dataclass
class DetectorParams:
    tp_rate: float = 1.0
    fp_rate: float = 0.0
    max_range: float = 6.0       # true positives only within this range [m]
    seed: int = 0
    conf_lo: float = 0.5
    conf_hi: float = 1.0


# ----------------------------------------------------------- world generation

def _carve_rect(occ, x0, y0, x1, y1):
    occ[x0:x1, y0:y1] = False


def _place_rooms(occ, params, rng):
    n = occ.shape[0]
    cpm = params.cells_per_meter
    rooms = []
    attempts = 0
    while len(rooms) < params.n_rooms:
        attempts += 1
        if attempts > 400:
            raise GenerationError(
                f"could not fit {params.n_rooms} rooms in "
                f"{params.extent} m (placed {len(rooms)})")
        w = int(round(rng.uniform(params.room_min, params.room_max) * cpm))
        h = int(round(rng.uniform(params.room_min, params.room_max) * cpm))
        if w + 2 >= n or h + 2 >= n:
            raise GenerationError("room size exceeds world extent")
        x0 = int(rng.integers(1, n - 1 - w))
        y0 = int(rng.integers(1, n - 1 - h))
        rect = (x0, y0, x0 + w, y0 + h)
        # one-cell wall gap between rooms
        clash = any(not (rect[2] + 1 <= r[0] or r[2] + 1 <= rect[0]
                         or rect[3] + 1 <= r[1] or r[3] + 1 <= rect[1])
                    for r in rooms)
        if clash:
            continue
        rooms.append(rect)
        _carve_rect(occ, *rect)
    return rooms


def _carve_corridor(occ, a, b, width):
    n = occ.shape[0]
    half = width // 2

    def clamp(lo, hi):
        return max(1, lo), min(n - 1, hi)

    (ax, ay), (bx, by) = a, b
    x0, x1 = clamp(min(ax, bx) - half, max(ax, bx) + half + 1)
    y0, y1 = clamp(ay - half, ay + half + 1)
    _carve_rect(occ, x0, y0, x1, y1)          # horizontal leg at a's y
    y0, y1 = clamp(min(ay, by) - half, max(ay, by) + half + 1)
    x0, x1 = clamp(bx - half, bx + half + 1)
    _carve_rect(occ, x0, y0, x1, y1)          # vertical leg at b's x


def _room_center(rect):
    return ((rect[0] + rect[2]) // 2, (rect[1] + rect[3]) // 2)


def _place_objects(occ, semantic, rooms, params, rng, labels):
    from scipy import ndimage

    group_of = {}
    for gi, group in enumerate(params.co_location_groups):
        for cat in group:
            group_of[cat] = gi
    home_room = {gi: int(rng.integers(len(rooms)))
                 for gi in set(group_of.values())}

    objects = []
    side = params.object_cells
    for label_id, cat in enumerate(params.categories, start=1):
        for _ in range(params.instances_per_category):
            placed = False
            for _attempt in range(200):
                gi = group_of.get(cat)
                if gi is not None and rng.random() < params.co_location_bias:
                    room = rooms[home_room[gi]]
                else:
                    room = rooms[int(rng.integers(len(rooms)))]
                x0, y0, x1, y1 = room
                # keep a one-cell free margin inside the room
                if x1 - x0 - 2 * 1 < side or y1 - y0 - 2 * 1 < side:
                    continue
                ox = int(rng.integers(x0 + 1, x1 - 1 - side + 1))
                oy = int(rng.integers(y0 + 1, y1 - 1 - side + 1))
                patch = (slice(ox, ox + side), slice(oy, oy + side))
                if occ[patch].any():
                    continue
                occ[patch] = True
                # objects must not disconnect the free space
                free_labels, n_comp = ndimage.label(
                    ~occ, structure=np.ones((3, 3), bool))
                if n_comp != 1:
                    occ[patch] = False
                    continue
                semantic[patch] = label_id
                cells = np.array([(x, y)
                                  for x in range(ox, ox + side)
                                  for y in range(oy, oy + side)])
                cx = (ox + side / 2.0) / params.cells_per_meter
                cy = (oy + side / 2.0) / params.cells_per_meter
                objects.append(WorldObject(label=cat, cells=cells,
                                           centroid=(cx, cy)))
                placed = True
                break
            if not placed:
                raise GenerationError(
                    f"could not place object {cat!r} after 200 attempts")
    return objects


def generate_world(params: WorldGenParams, seed: int) -> World:
    """Seeded procedural floor plan: rooms, connecting corridors, objects.

    Raises GenerationError when the parameters cannot be satisfied. The free
    space is guaranteed to be one 8-connected component.
    """
    if params.extent <= 0 or params.n_rooms <= 0:
        raise GenerationError("extent and room count must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(params.extent * params.cells_per_meter))
    occ = np.ones((n, n), dtype=bool)
    rooms = _place_rooms(occ, params, rng)
    centers = [_room_center(r) for r in rooms]
    for a, b in zip(centers, centers[1:]):
        _carve_corridor(occ, a, b, params.corridor_width)
    semantic = np.zeros((n, n), dtype=np.int16)
    labels = [VOID_LABEL] + list(params.categories)
    objects = _place_objects(occ, semantic, rooms, params, rng, labels)
    return World(occupancy=occ, semantic=semantic, labels=labels,
                 objects=objects, cell_size=1.0 / params.cells_per_meter,
                 seed=seed)


# ------------------------------------------------------------------ raycasting

def raycast_grid(world: World, pose: tuple[float, float, float],
                 n_rays: int, fov: float, max_range: float) -> RayCast:
    """Exact grid traversal of n_rays spread over the field of view.

    Depth is the entry distance of the first opaque cell; rays that reach
    max_range (or leave the grid) are censored with depth = max_range and
    valid = False.
    """
    if n_rays < 8:
        raise ValueError("n_rays must be >= 8")
    occ = world.occupancy
    n_x, n_y = occ.shape
    cs = world.cell_size
    x0, y0, heading = pose
    c0 = world.cell_of(x0, y0)
    if not (0 <= c0[0] < n_x and 0 <= c0[1] < n_y) or occ[c0]:
        raise InvalidPose(f"pose {pose[:2]} is not in free space")

    angles = heading + (-fov / 2.0 + (np.arange(n_rays) + 0.5) * (fov / n_rays))
    dx = np.cos(angles)
    dy = np.sin(angles)
    step_x = np.sign(dx).astype(np.int64)
    step_y = np.sign(dy).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta_x = np.where(dx != 0, cs / np.abs(dx), np.inf)
        t_delta_y = np.where(dy != 0, cs / np.abs(dy), np.inf)
    cx = np.full(n_rays, c0[0], dtype=np.int64)
    cy = np.full(n_rays, c0[1], dtype=np.int64)
    bx = (cx + (step_x > 0)) * cs
    by = (cy + (step_y > 0)) * cs
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max_x = np.where(dx != 0, (bx - x0) / dx, np.inf)
        t_max_y = np.where(dy != 0, (by - y0) / dy, np.inf)

    depth = np.full(n_rays, max_range)
    valid = np.zeros(n_rays, dtype=bool)
    hit_cells = np.full((n_rays, 2), -1, dtype=np.int64)
    active = np.ones(n_rays, dtype=bool)
    free_chunks = [np.array([[c0[0], c0[1]]], dtype=np.int64)]

    while active.any():
        go_x = active & (t_max_x <= t_max_y)
        go_y = active & ~go_x
        t_next = np.where(go_x, t_max_x, t_max_y)
        censor = active & (t_next > max_range)
        active &= ~censor
        go_x &= active
        go_y &= active
        if not active.any():
            break
        cx[go_x] += step_x[go_x]
        t_max_x[go_x] += t_delta_x[go_x]
        cy[go_y] += step_y[go_y]
        t_max_y[go_y] += t_delta_y[go_y]

        inside = (cx >= 0) & (cx < n_x) & (cy >= 0) & (cy < n_y)
        escaped = active & ~inside
        active &= inside
        gx = np.clip(cx, 0, n_x - 1)
        gy = np.clip(cy, 0, n_y - 1)
        hit = active & occ[gx, gy]
        if hit.any():
            depth[hit] = t_next[hit]
            valid[hit] = True
            hit_cells[hit, 0] = cx[hit]
            hit_cells[hit, 1] = cy[hit]
            active &= ~hit
        still = active
        if still.any():
            free_chunks.append(
                np.stack([cx[still], cy[still]], axis=1))
        del escaped

    free = np.unique(np.concatenate(free_chunks), axis=0)
    return RayCast(depth=depth, valid=valid, hit_cells=hit_cells,
                   free_cells=free)


def render_observation(world: World, pose: tuple[float, float, float],
                       n_rays: int, fov: float, max_range: float,
                       rays: RayCast | None = None,
                       depth_noise: float = 0.0,
                       noise_rng=None) -> PosedObservation:
    """Rendered scanline observation at a pose (optionally from a precomputed
    raycast). Censored rays carry depth = max_range, the void label, and
    valid = False so they take no part in map updates.

    depth_noise > 0 adds zero-mean Gaussian noise with sigma =
    depth_noise * d^2 to valid ray depths (the stereo accuracy model the
    mapping blur assumes); off by default so geometry tests stay exact.
    """
    if rays is None:
        rays = raycast_grid(world, pose, n_rays, fov, max_range)
    depth = rays.depth[None, :].copy()
    if depth_noise > 0:
        rng = noise_rng if noise_rng is not None else np.random.default_rng(0)
        sigma = depth_noise * depth ** 2
        noisy = depth + rng.normal(size=depth.shape) * sigma
        keep = rays.valid[None, :]
        depth = np.where(keep, np.clip(noisy, world.cell_size, max_range),
                         depth)
    label_ids = np.zeros(len(rays.depth), dtype=np.int64)
    ok = rays.valid
    label_ids[ok] = world.semantic[rays.hit_cells[ok, 0],
                                   rays.hit_cells[ok, 1]]
    labels = np.array(world.labels, dtype="U32")[label_ids]
    return PosedObservation(
        pose=pose,
        depth=depth,
        valid=rays.valid[None, :].copy(),
        fov=fov,
        max_range=max_range,
        hit_labels=labels[None, :],
    )


# -------------------------------------------------------------- agent stepping

def _cell_center(cell, cs):
    return ((cell[0] + 0.5) * cs, (cell[1] + 0.5) * cs)


def step_agent(world: World, state: AgentState, path: Path,
               step_size: float) -> AgentState:
    """Advance up to step_size meters along the path polyline.

    The agent position is projected onto the polyline of path cell centers
    (stateless: repeated calls resume where the previous step ended), the
    heading follows the direction of motion, and path_length accumulates the
    Euclidean distance actually moved.
    """
    cs = world.cell_size
    pts = [_cell_center(c, cs) for c in path.cells]
    x, y, heading = state.pose
    if len(pts) == 1:
        pts = [pts[0], pts[0]]

    # closest point on the polyline (earliest segment wins ties)
    best = (float("inf"), 0, 0.0)
    for i, (a, b) in enumerate(zip(pts, pts[1:])):
        abx, aby = b[0] - a[0], b[1] - a[1]
        seg2 = abx * abx + aby * aby
        t = 0.0 if seg2 == 0 else max(0.0, min(1.0, (
            (x - a[0]) * abx + (y - a[1]) * aby) / seg2))
        px, py = a[0] + t * abx, a[1] + t * aby
        d = math.hypot(x - px, y - py)
        if d < best[0] - 1e-12:
            best = (d, i, t)
    _, i, t = best

    a, b = pts[i], pts[i + 1]
    cur = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
    budget = step_size
    moved = 0.0
    while budget > 1e-12:
        a, b = pts[i], pts[i + 1]
        remx, remy = b[0] - cur[0], b[1] - cur[1]
        rem = math.hypot(remx, remy)
        if rem <= 1e-12:
            if i + 2 >= len(pts):
                break
            i += 1
            continue
        if rem <= budget:
            cur = b
            moved += rem
            budget -= rem
            heading = math.atan2(remy, remx)
            if i + 2 >= len(pts):
                break
            i += 1
        else:
            cur = (cur[0] + remx / rem * budget,
                   cur[1] + remy / rem * budget)
            moved += budget
            heading = math.atan2(remy, remx)
            budget = 0.0

    cell = world.cell_of(cur[0], cur[1])
    assert not world.occupancy[cell], "agent stepped into an occupied cell"
    return AgentState(pose=(cur[0], cur[1], heading),
                      steps_taken=state.steps_taken + 1,
                      path_length=state.path_length + moved)


# -------------------------------------------------------------- detection

def simulate_detection(world: World, obs: PosedObservation, target_label: str,
                       params: DetectorParams, frame_index: int = 0,
                       rays: RayCast | None = None) -> Detection | None:
    """Simulated object detector, deterministic per (seed, frame_index).

    A true detection fires with probability tp_rate when any ray hits a
    target cell within range; independently a false detection fires with
    probability fp_rate at a random visible non-target cell (reported under
    the target label). True detections take priority when both fire.
    """
    if rays is None:
        rays = raycast_grid(world, obs.pose, obs.depth.shape[1], obs.fov,
                            obs.max_range)
    rng = np.random.default_rng([params.seed, frame_index])
    u_tp = rng.random()
    u_fp = rng.random()
    confidence = float(rng.uniform(params.conf_lo, params.conf_hi))

    ok = rays.valid
    cells = rays.hit_cells[ok]
    depths = rays.depth[ok]
    labels = world.semantic[cells[:, 0], cells[:, 1]]
    try:
        target_id = world.labels.index(target_label)
    except ValueError:
        target_id = -1

    is_target = (labels == target_id) & (depths <= params.max_range)
    if is_target.any() and u_tp < params.tp_rate:
        k = int(np.argmin(np.where(is_target, depths, np.inf)))
        return Detection(label=target_label,
                         cell=(int(cells[k, 0]), int(cells[k, 1])),
                         confidence=confidence)

    if u_fp < params.fp_rate:
        others = np.unique(cells[labels != target_id], axis=0)
        if len(others):
            k = int(rng.integers(len(others)))
            return Detection(label=target_label,
                             cell=(int(others[k, 0]), int(others[k, 1])),
                             confidence=confidence)
    return None


# ------------------------------------------------------------- serialization

def save_world(path, world: World) -> None:
    """Human-readable JSON dump; occupancy rows are '#'/'.' strings (row i
    is grid x = i)."""
    doc = {
        "cell_size": world.cell_size,
        "seed": world.seed,
        "labels": world.labels,
        "occupancy": ["".join("#" if v else "." for v in row)
                      for row in world.occupancy],
        "objects": [
            {"label": o.label,
             "cells": [[int(x), int(y)] for x, y in o.cells],
             "centroid": [o.centroid[0], o.centroid[1]]}
            for o in world.objects
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_world(path) -> World:
    with open(path) as fh:
        doc = json.load(fh)
    occ = np.array([[c == "#" for c in row] for row in doc["occupancy"]],
                   dtype=bool)
    labels = list(doc["labels"])
    semantic = np.zeros(occ.shape, dtype=np.int16)
    objects = []
    for o in doc["objects"]:
        cells = np.array(o["cells"], dtype=np.int64)
        semantic[cells[:, 0], cells[:, 1]] = labels.index(o["label"])
        objects.append(WorldObject(
            label=o["label"], cells=cells,
            centroid=(float(o["centroid"][0]), float(o["centroid"][1]))))
    return World(occupancy=occ, semantic=semantic, labels=labels,
                 objects=objects, cell_size=float(doc["cell_size"]),
                 seed=int(doc["seed"]))
