"""Grid path planning and reachability on the navigable sub-map.

Motion is plain 8-connected with step costs {1, sqrt(2)} * cell_size. Path
costs are reported analytically from step counts, so equal-cost paths found
by different searches compare bit-identically. Corner cutting cannot occur
in practice because the navigable mask is produced with at least one cell of
obstacle inflation.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

SQRT2 = math.sqrt(2.0)

_EIGHT = np.ones((3, 3), dtype=bool)
_MOVES = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
          if (dx, dy) != (0, 0)]


class PlanningError(Exception):
    pass


class InvalidStart(PlanningError):
    pass


class Unreachable(PlanningError):
    pass


@dataclass
class Path:
    """Ordered 8-adjacent cells with the analytic octile length in meters."""

    cells: list[tuple[int, int]]
    length: float


def path_length(cells: list[tuple[int, int]], cell_size: float) -> float:
    """Octile length from step counts: (n_straight + sqrt(2) n_diag) * size."""
    n_straight = n_diag = 0
    for a, b in zip(cells, cells[1:]):
        if a[0] != b[0] and a[1] != b[1]:
            n_diag += 1
        else:
            n_straight += 1
    return (n_straight + SQRT2 * n_diag) * cell_size


def snap_to_navigable(nav: np.ndarray, cell: tuple[int, int],
                      radius_cells: float) -> tuple[int, int] | None:
    """Nearest navigable cell within a Euclidean radius, row-major ties."""
    n_x, n_y = nav.shape
    x, y = cell
    if 0 <= x < n_x and 0 <= y < n_y and nav[x, y]:
        return (x, y)
    r = int(math.ceil(radius_cells))
    best = None
    best_key = None
    for cx in range(max(0, x - r), min(n_x, x + r + 1)):
        for cy in range(max(0, y - r), min(n_y, y + r + 1)):
            if not nav[cx, cy]:
                continue
            d2 = (cx - x) ** 2 + (cy - y) ** 2
            if d2 > radius_cells * radius_cells:
                continue
            key = (d2, cx, cy)
            if best_key is None or key < best_key:
                best_key = key
                best = (cx, cy)
    return best


def _octile(a: tuple[int, int], b: tuple[int, int], cell_size: float) -> float:
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (max(dx, dy) + (SQRT2 - 1.0) * min(dx, dy)) * cell_size


def astar(nav: np.ndarray, start: tuple[int, int], goal: tuple[int, int],
          cell_size: float, goal_snap_radius: float = 1.5) -> Path:
    """Minimal-cost 8-connected path with an octile heuristic.

    The goal may lie off the navigable mask; it is snapped to the nearest
    navigable cell within goal_snap_radius meters. Ties in the open set
    break by row-major cell order. Raises InvalidStart when the start is
    not navigable and Unreachable when no path (or no snap target) exists.
    """
    nav = np.asarray(nav, dtype=bool)
    n_x, n_y = nav.shape
    start = (int(start[0]), int(start[1]))
    if not (0 <= start[0] < n_x and 0 <= start[1] < n_y) or not nav[start]:
        raise InvalidStart(f"start {start} not navigable")
    snapped = snap_to_navigable(nav, (int(goal[0]), int(goal[1])),
                                goal_snap_radius / cell_size)
    if snapped is None:
        raise Unreachable(f"no navigable cell within "
                          f"{goal_snap_radius} m of goal {tuple(goal)}")
    goal = snapped

    g_best = {start: 0.0}
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    open_heap = [(_octile(start, goal, cell_size),
                  start[0] * n_y + start[1], start)]
    closed = set()
    while open_heap:
        _, _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == goal:
            cells = [cur]
            while cur in parent:
                cur = parent[cur]
                cells.append(cur)
            cells.reverse()
            return Path(cells=cells, length=path_length(cells, cell_size))
        closed.add(cur)
        g_cur = g_best[cur]
        for dx, dy in _MOVES:
            nxt = (cur[0] + dx, cur[1] + dy)
            if not (0 <= nxt[0] < n_x and 0 <= nxt[1] < n_y) or not nav[nxt]:
                continue
            step = SQRT2 if dx != 0 and dy != 0 else 1.0
            g_new = g_cur + step * cell_size
            if nxt not in g_best or g_new < g_best[nxt] - 1e-12:
                g_best[nxt] = g_new
                parent[nxt] = cur
                heapq.heappush(open_heap, (
                    g_new + _octile(nxt, goal, cell_size),
                    nxt[0] * n_y + nxt[1], nxt))
    raise Unreachable(f"goal {goal} not reachable from {start}")


def reachable_set(nav: np.ndarray, source: tuple[int, int]) -> np.ndarray:
    """8-connected flood fill over the navigable mask from the source."""
    nav = np.asarray(nav, dtype=bool)
    n_x, n_y = nav.shape
    source = (int(source[0]), int(source[1]))
    if not (0 <= source[0] < n_x and 0 <= source[1] < n_y) or not nav[source]:
        raise InvalidStart(f"source {source} not navigable")
    labels, _ = ndimage.label(nav, structure=_EIGHT)
    return labels == labels[source]


def distance_field(nav: np.ndarray, sources, cell_size: float = 1.0
                   ) -> np.ndarray:
    """Exact octile geodesic distance from a set of source cells.

    Returns an array with distances in meters over the navigable mask and
    +inf elsewhere or where unreachable. Sources off the mask are ignored.
    """
    nav = np.asarray(nav, dtype=bool)
    n_x, n_y = nav.shape
    out = np.full((n_x, n_y), np.inf)
    src = [(int(x), int(y)) for x, y in sources
           if 0 <= x < n_x and 0 <= y < n_y and nav[x, y]]
    if not src:
        return out

    n = n_x * n_y
    rows, cols, data = [], [], []
    flat = np.arange(n).reshape(n_x, n_y)
    for dx, dy in _MOVES:
        sx = slice(max(0, -dx), n_x - max(0, dx))
        sy = slice(max(0, -dy), n_y - max(0, dy))
        tx = slice(max(0, dx), n_x - max(0, -dx))
        ty = slice(max(0, dy), n_y - max(0, -dy))
        both = nav[sx, sy] & nav[tx, ty]
        rows.append(flat[sx, sy][both])
        cols.append(flat[tx, ty][both])
        w = SQRT2 if dx != 0 and dy != 0 else 1.0
        data.append(np.full(int(both.sum()), w * cell_size))
    graph = csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n))
    src_flat = [x * n_y + y for x, y in src]
    dist = _csgraph_dijkstra(graph, directed=True, indices=src_flat,
                             min_only=True)
    out = dist.reshape(n_x, n_y)
    out[~nav] = np.inf
    return out
