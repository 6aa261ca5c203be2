"""Closed-loop object search: observe, map, score goals, plan, step.

The agent keeps a persistent belief map plus its accumulated occupancy
knowledge (ray-traversed cells are known free, hit cells known walls).
Each step integrates the new observation, re-scores frontier and cluster
goals, and follows the current plan; an accepted detection commits the agent
to navigate to the detection cell and terminate there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from semnav import exploration, mapping
from semnav.config import Config
from semnav.embedding import Codebook, embed_text, synth_embed_frame, \
    upsample_bilinear
from semnav.planning import InvalidStart, Path, Unreachable, astar, \
    distance_field, reachable_set, snap_to_navigable
from semnav.simulator import AgentState, DetectorParams, World, \
    raycast_grid, render_observation, simulate_detection, step_agent

SUCCESS = "success"
MISDETECTION = "misdetection"
BUDGET = "budget"
EXHAUSTED = "exhausted"


@dataclass
class LegResult:
    """Outcome of the search for one object goal."""

    found: bool
    reason: str          # success | misdetection | budget | exhausted
    steps: int
    path_length: float   # meters walked during this leg


def distance_to_instances(world: World, pose, category: str) -> float:
    """Distance from a pose to the nearest cell of any category instance."""
    cs = world.cell_size
    best = math.inf
    for obj in world.instances_of(category):
        dx = (obj.cells[:, 0] + 0.5) * cs - pose[0]
        dy = (obj.cells[:, 1] + 0.5) * cs - pose[1]
        best = min(best, float(np.min(np.hypot(dx, dy))))
    return best


class SearchAgent:
    """Embodied agent running the full search policy in one world."""

    def __init__(self, world: World, codebook: Codebook, cfg: Config,
                 start_pose, seed: int, trace=None):
        n = world.n_x
        if abs(world.cell_size - 1.0 / cfg.simulator.cells_per_meter) > 1e-9:
            raise ValueError("world cell size does not match config grid")
        self.world = world
        self.codebook = codebook
        self.cfg = cfg
        self.seed = seed
        self.trace = trace
        self.agent = AgentState(pose=tuple(start_pose))
        self.frame_index = 0
        self.det_params = DetectorParams(
            tp_rate=cfg.detector.tp_rate, fp_rate=cfg.detector.fp_rate,
            max_range=cfg.detector.det_range, seed=seed + 1)
        self._extent = (n * world.cell_size, world.n_y * world.cell_size)
        self.reset_memory()

    # ------------------------------------------------------------- state

    def reset_memory(self):
        """Fresh belief map and occupancy knowledge (no-reuse ablation)."""
        cfg = self.cfg
        model = mapping.UpdateModel(
            d_opt=cfg.mapping.d_opt, p=cfg.mapping.p,
            eps_var=cfg.mapping.eps_var,
            truncation_sigmas=cfg.mapping.truncation_sigmas,
            min_kernel_radius=cfg.mapping.min_kernel_radius,
            feature_variance_exponent=cfg.mapping.feature_variance_exponent,
            literal_variance_weights=cfg.mapping.literal_variance_weights)
        self.map = mapping.create_map(
            self._extent[0], self._extent[1], cfg.simulator.cells_per_meter,
            cfg.mapping.feature_dim, cfg.mapping.prior_variance, model=model)
        shape = (self.map.n_x, self.map.n_y)
        self.known_free = np.zeros(shape, dtype=bool)
        self.known_wall = np.zeros(shape, dtype=bool)

    def observe(self):
        """Render, embed, and integrate one frame; update occupancy."""
        cfg = self.cfg.simulator
        rays = raycast_grid(self.world, self.agent.pose, cfg.n_rays,
                            cfg.fov, cfg.max_range)
        obs = render_observation(
            self.world, self.agent.pose, cfg.n_rays, cfg.fov, cfg.max_range,
            rays=rays, depth_noise=cfg.depth_noise,
            noise_rng=np.random.default_rng([self.seed, self.frame_index, 3]))
        # patch labels: the center ray of each block feeds the embedder
        w_f = cfg.n_rays // cfg.patch_rays
        centers = np.arange(w_f) * cfg.patch_rays + cfg.patch_rays // 2
        patch_labels = obs.hit_labels[:, centers]
        frame = synth_embed_frame(self.codebook, patch_labels,
                                  seed=[self.seed, self.frame_index])
        obs.features = upsample_bilinear(frame, 1, cfg.n_rays)
        mapping.integrate_observation(self.map, obs)
        self.known_free[rays.free_cells[:, 0], rays.free_cells[:, 1]] = True
        hits = rays.hit_cells[rays.valid]
        self.known_wall[hits[:, 0], hits[:, 1]] = True
        self.frame_index += 1
        return obs, rays

    def submaps(self) -> exploration.SubMaps:
        obstacle = ~self.known_free | self.known_wall
        return exploration.derive_submaps(
            self.map, self.cfg.tau_e, self.cfg.tau_c, obstacle,
            agent_radius=self.cfg.planning.agent_radius)

    # ------------------------------------------------------------ planning

    def _agent_cell(self):
        return self.world.cell_of(self.agent.pose[0], self.agent.pose[1])

    def _plan_to(self, sub: exploration.SubMaps, cell) -> Path | None:
        nav = sub.navigable
        cs = self.world.cell_size
        start = snap_to_navigable(nav, self._agent_cell(),
                                  self.cfg.planning.agent_radius / cs + 1.0)
        if start is None:
            return None
        try:
            return astar(nav, start, cell, cs,
                         goal_snap_radius=self.cfg.planning.goal_snap_radius)
        except (Unreachable, InvalidStart):
            return None

    def _plan_to_goal(self, sub: exploration.SubMaps,
                      goal: exploration.NavGoal) -> Path | None:
        """Plan to a goal, or as close to it as known space allows.

        Frontier targets often sit beyond the currently navigable area (the
        semantic map covers surfaces the agent has seen, not walked); the
        partial-approach plan drives to the reachable navigable cell nearest
        the target so new observations can extend the map, after which the
        regular replanning takes over.
        """
        path = self._plan_to(sub, goal.target_cell)
        if path is not None:
            return path
        nav = sub.navigable
        cs = self.world.cell_size
        start = snap_to_navigable(nav, self._agent_cell(),
                                  self.cfg.planning.agent_radius / cs + 1.0)
        if start is None:
            return None
        reach = reachable_set(nav, start)
        cells = np.argwhere(reach)
        tx, ty = goal.target_cell
        d2 = (cells[:, 0] - tx) ** 2 + (cells[:, 1] - ty) ** 2
        k = int(np.argmin(d2))
        closest = (int(cells[k, 0]), int(cells[k, 1]))
        if closest == start:
            return None  # cannot get any closer than where we stand
        try:
            return astar(nav, start, closest, cs, goal_snap_radius=0.0)
        except (Unreachable, InvalidStart):
            return None

    def _path_valid(self, path: Path, sub: exploration.SubMaps) -> bool:
        for c in path.cells:
            if not sub.navigable[c]:
                return False
        return True

    def _plan_geo_frontier(self, sub: exploration.SubMaps, banned: dict,
                           step_no: int):
        """Coverage fallback: plan to the navigable edge of known space.

        Fires only when no semantic goal is plannable. In this scanline
        world the belief map covers surfaces, not floor, so unseen floor can
        remain even when every mapped frontier is saturated; walking to the
        known/unknown boundary restores coverage. Targets are banned in
        coarse blocks after a visit (same mechanism as semantic goals).
        """
        unknown = ~self.known_free & ~self.known_wall
        if not unknown.any():
            return None, None
        from scipy import ndimage
        struct = np.ones((3, 3), dtype=bool)
        boundary = self.known_free & ndimage.binary_dilation(unknown, struct)
        targets = sub.navigable & ndimage.binary_dilation(boundary, struct)
        if not targets.any():
            return None, None
        nav = sub.navigable
        cs = self.world.cell_size
        start = snap_to_navigable(nav, self._agent_cell(),
                                  self.cfg.planning.agent_radius / cs + 1.0)
        if start is None:
            return None, None
        field = distance_field(nav, [start], cell_size=cs)
        cells = np.argwhere(targets)
        dists = field[cells[:, 0], cells[:, 1]]
        order = np.lexsort((cells[:, 1], cells[:, 0], dists))
        for k in order:
            if not np.isfinite(dists[k]):
                break
            cell = (int(cells[k, 0]), int(cells[k, 1]))
            key = ("geo", (cell[0] // 4, cell[1] // 4))
            if banned.get(key, -1) >= step_no:
                continue
            if cell == start:
                continue
            try:
                return astar(nav, start, cell, cs, goal_snap_radius=0.0), key
            except (Unreachable, InvalidStart):
                continue
        return None, None

    def _ranked_candidates(self, s_q, sub):
        """Goal candidates ranked by (score desc, frontier first, support).

        Frontier targets are built lazily (their geodesic anchor is the
        expensive part); identity keys stay stable across steps so goal
        changes can be detected cheaply.
        """
        # generous radius: distant chains are approached partway (the plan
        # fallback), so only absurdly isolated ones are filtered here
        reach = math.ceil(2 * self.cfg.simulator.max_range
                          * self.cfg.simulator.cells_per_meter)
        chains = exploration.extract_frontiers(
            sub, min_length=self.cfg.exploration.min_frontier_length,
            nav_reach_cells=reach)
        cands = []
        for ch, score in zip(chains,
                             exploration.score_frontiers(chains, s_q, sub)):
            key = (exploration.FRONTIER, (int(ch[0, 0]), int(ch[0, 1])))
            cands.append((score, 0, key, ch))
        for goal in exploration.cluster_high_similarity(
                s_q, sub, self.cfg.exploration.tau_sim):
            key = (exploration.CLUSTER, goal.target_cell)
            cands.append((goal.score, 1, key, goal))
        cands.sort(key=lambda c: (-c[0], c[1], c[2][1]))
        return cands

    def _materialize(self, cand, s_q, sub) -> exploration.NavGoal:
        score, kind_rank, _key, payload = cand
        if kind_rank == 1:
            return payload
        return exploration.make_frontier_goal(payload, s_q, sub)

    # ------------------------------------------------------------- search

    def search(self, category: str, budget: int) -> LegResult:
        """Run the closed loop for one object goal.

        Terminates with success/misdetection on arrival at an accepted
        detection, exhausted when no goal can be planned to, or budget.
        """
        cfg = self.cfg
        query = embed_text(self.codebook, category)
        mapping.reset_search_layer(self.map)
        start_len = self.agent.path_length
        start_steps = self.agent.steps_taken

        path: Path | None = None
        goal_key = None
        committed = False
        turn = cfg.simulator.fov / 2.0
        # A full look-around at leg start populates the map and gives the
        # detector a chance before the agent commits to a direction.
        scan_remaining = int(math.ceil(2 * math.pi / turn))
        # Goals already reached are banned for a while so the agent does not
        # re-select a goal it cannot make progress on (e.g. a frontier whose
        # nearest navigable cell is where it already stands).
        banned: dict[tuple, int] = {}
        ban_steps = 30
        # With no plannable goal the agent scans in place: repeated views
        # mature observed cells into the explored set, which spawns the
        # first frontiers. Exhaustion is declared only after the grace spin.
        max_wait = int(2 * math.ceil(2 * math.pi / turn)) + 5
        waited = 0

        def leg(found, reason):
            return LegResult(found=found, reason=reason,
                             steps=self.agent.steps_taken - start_steps,
                             path_length=self.agent.path_length - start_len)

        def spin():
            x, y, heading = self.agent.pose
            self.agent = AgentState(pose=(x, y, heading + turn),
                                    steps_taken=self.agent.steps_taken + 1,
                                    path_length=self.agent.path_length)

        def face(cell):
            x, y, _ = self.agent.pose
            cs = self.world.cell_size
            heading = math.atan2((cell[1] + 0.5) * cs - y,
                                 (cell[0] + 0.5) * cs - x)
            self.agent = AgentState(pose=(x, y, heading),
                                    steps_taken=self.agent.steps_taken,
                                    path_length=self.agent.path_length)

        for step_no in range(budget):
            obs, rays = self.observe()
            s_q = mapping.query_similarity(self.map, query)
            sub = self.submaps()

            det = simulate_detection(self.world, obs, category,
                                     self.det_params,
                                     frame_index=self.frame_index - 1,
                                     rays=rays)
            if (det is not None and not committed
                    and det.confidence >= cfg.detector.conf_threshold):
                if cfg.exploration.consensus_filtering:
                    decision = exploration.consensus_filter(
                        det, s_q, sub, cfg.exploration.consensus_percentile)
                else:
                    decision = exploration.ConsensusDecision(True, "accepted")
                if decision.accepted:
                    new_path = self._plan_to(sub, det.cell)
                    if new_path is not None:
                        committed = True
                        path = new_path
                        goal_key = ("detection", det.cell)

            if committed and not self._path_valid(path, sub):
                path = self._plan_to(sub, goal_key[1])
                if path is None:
                    committed = False  # detection target became unreachable
                    goal_key = None

            if not committed:
                if scan_remaining > 0:
                    scan_remaining -= 1
                    self._emit_trace(s_q, sub, [], None, False)
                    spin()
                    continue
                cands = [c for c in self._ranked_candidates(s_q, sub)
                         if banned.get(c[2], -1) < step_no]
                keep = (path is not None and goal_key is not None
                        and not cfg.planning.replan_every_step
                        and any(c[2] == goal_key for c in cands[:1])
                        and self._path_valid(path, sub))
                if not keep:
                    path = None
                    goal_key = None
                    for cand in cands:
                        goal = self._materialize(cand, s_q, sub)
                        new_path = self._plan_to_goal(sub, goal)
                        if new_path is not None:
                            path = new_path
                            goal_key = cand[2]
                            break
                    if path is None:
                        path, goal_key = self._plan_geo_frontier(
                            sub, banned, step_no)
                    if path is None:
                        self._emit_trace(s_q, sub, cands, None, committed)
                        if waited < max_wait:
                            waited += 1
                            spin()
                            continue
                        return leg(False, EXHAUSTED)
                waited = 0
                self._emit_trace(s_q, sub, cands, goal_key, committed)
            else:
                self._emit_trace(s_q, sub, [], goal_key, committed)

            before = self.agent.path_length
            self.agent = step_agent(self.world, self.agent, path,
                                    cfg.simulator.step_size)
            arrived = self.agent.path_length - before < 1e-9
            if arrived:
                if committed:
                    dist = distance_to_instances(self.world, self.agent.pose,
                                                 category)
                    if dist <= cfg.benchmark.success_radius:
                        return leg(True, SUCCESS)
                    return leg(False, MISDETECTION)
                # exploration goal consumed: ban it and look around from the
                # new vantage point (rotation is free path-length-wise and
                # matures the surroundings), then re-derive goals
                banned[goal_key] = step_no + ban_steps
                face(path.cells[-1])
                scan_remaining = int(math.ceil(2 * math.pi / turn))
                path = None
                goal_key = None
        return leg(False, BUDGET)

    def _emit_trace(self, s_q, sub, cands, selected_key, committed):
        if self.trace is None:
            return
        self.trace({
            "frame": self.frame_index - 1,
            "pose": [round(v, 4) for v in self.agent.pose],
            "goals": [{"kind": c[2][0], "anchor": list(c[2][1]),
                       "score": round(float(c[0]), 4)} for c in cands],
            "selected": (list(selected_key[1]) if selected_key else None),
            "committed": bool(committed),
        })
