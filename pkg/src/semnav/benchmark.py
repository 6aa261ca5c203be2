"""Multi-object episodes, closed-loop execution, and the metric suite.

An episode is a start pose plus an ordered category sequence in one world;
execution truncates at the first object the agent fails to find. Metrics:
success rate (all objects found), SPL (success weighted by the ratio of
sequence-wise oracle path length to the agent's), progress (fraction of
objects found), and PPL (progress weighted by path ratio over the completed
prefix).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from semnav.config import Config
from semnav.embedding import Codebook
from semnav.exploration import inflation_radius_cells
from semnav.planning import Unreachable, distance_field, reachable_set
from semnav.policy import SearchAgent
from semnav.simulator import GenerationError, World


@dataclass
class Episode:
    episode_id: int
    world_id: int
    world_seed: int
    start_pose: tuple[float, float, float]
    goal_sequence: list[str]
    seed: int


@dataclass
class ObjectResult:
    category: str
    found: bool
    agent_path_length: float
    oracle_path_length: float
    reason: str
    steps: int


@dataclass
class EpisodeResult:
    episode_id: int
    n_goals: int
    objects: list[ObjectResult] = field(default_factory=list)


@dataclass
class Metrics:
    sr: float
    spl: float
    pr: float
    ppl: float


def _inflated_navigable(world: World, agent_radius: float) -> np.ndarray:
    r = inflation_radius_cells(agent_radius, 1.0 / world.cell_size)
    ax = np.arange(-r, r + 1)
    disk = (ax[:, None] ** 2 + ax[None, :] ** 2) <= r * r
    return ~ndimage.binary_dilation(world.occupancy, structure=disk)


def goal_region(world: World, category: str, success_radius: float,
                navigable: np.ndarray | None = None) -> np.ndarray:
    """Cells whose center lies within the success radius of any instance."""
    target = np.zeros_like(world.occupancy)
    for obj in world.instances_of(category):
        target[obj.cells[:, 0], obj.cells[:, 1]] = True
    if not target.any():
        return target
    dist = ndimage.distance_transform_edt(~target) * world.cell_size
    region = dist <= success_radius
    if navigable is None:
        navigable = world.navigable
    return region & navigable


def oracle_shortest_path(world: World, from_pose, category: str,
                         success_radius: float = 1.5) -> float:
    """Shortest octile geodesic on the true navigable grid from the pose to
    any cell within the success radius of any category instance."""
    goals = goal_region(world, category, success_radius)
    if not goals.any():
        raise Unreachable(f"no instance of {category!r} in world")
    start = world.cell_of(from_pose[0], from_pose[1])
    if goals[start]:
        return 0.0
    field_ = distance_field(world.navigable, np.argwhere(goals),
                            cell_size=world.cell_size)
    d = field_[start]
    if not np.isfinite(d):
        raise Unreachable(f"{category!r} unreachable from {from_pose[:2]}")
    return float(d)


def generate_episodes(worlds: list[World], n_episodes: int, seq_len: int,
                      seed: int, agent_radius: float = 0.2,
                      success_radius: float = 1.5,
                      min_first_leg: float = 1.0) -> list[Episode]:
    """Seeded episode sampling with verified reachability.

    Start cells are drawn from the inflated navigable set; a category is
    eligible only when every one of its instances has a reachable success
    region on the inflated grid; the first goal must additionally lie at
    least min_first_leg meters away (no degenerate zero-length legs).
    Sequences avoid immediate repetition. Raises GenerationError naming the
    world when it cannot support seq_len categories.
    """
    region_cache: dict[int, tuple[np.ndarray, list]] = {}

    def instance_regions(world_id, world, nav):
        if world_id not in region_cache:
            regions = []
            for obj in world.objects:
                inst = np.zeros_like(nav)
                inst[obj.cells[:, 0], obj.cells[:, 1]] = True
                dist = ndimage.distance_transform_edt(~inst) * world.cell_size
                regions.append((obj.label, (dist <= success_radius) & nav))
            region_cache[world_id] = regions
        return region_cache[world_id]

    episodes = []
    for i in range(n_episodes):
        world_id = i % len(worlds)
        world = worlds[world_id]
        rng = np.random.default_rng([seed, i])
        nav = _inflated_navigable(world, agent_radius)
        free = np.argwhere(nav)
        if len(free) == 0:
            raise GenerationError(
                f"world seed {world.seed}: no navigable space after inflation")
        regions = instance_regions(world_id, world, nav)
        eligible: list[str] = []
        far_enough: list[str] = []
        cell = free[0]
        for _attempt in range(50):
            cell = free[int(rng.integers(len(free)))]
            reach = reachable_set(nav, (int(cell[0]), int(cell[1])))
            by_cat: dict[str, bool] = {}
            for label, region in regions:
                ok = bool((region & reach).any())
                by_cat[label] = by_cat.get(label, True) and ok
            eligible = sorted(c for c, ok in by_cat.items() if ok)
            if len(eligible) < seq_len:
                continue
            field_ = distance_field(world.navigable,
                                    [(int(cell[0]), int(cell[1]))],
                                    cell_size=world.cell_size)
            far_enough = []
            for c in eligible:
                d = min(float(field_[r].min()) if r.any() else math.inf
                        for lab, r in regions if lab == c)
                if d >= min_first_leg:
                    far_enough.append(c)
            if far_enough:
                break
        else:
            raise GenerationError(
                f"world seed {world.seed}: fewer than {seq_len} reachable "
                f"categories from sampled starts")
        cs = world.cell_size
        heading = float(rng.uniform(-math.pi, math.pi))
        pose = ((cell[0] + 0.5) * cs, (cell[1] + 0.5) * cs, heading)
        sequence: list[str] = []
        while len(sequence) < seq_len:
            pool = far_enough if not sequence else eligible
            cat = pool[int(rng.integers(len(pool)))]
            if sequence and cat == sequence[-1]:
                continue
            sequence.append(cat)
        episodes.append(Episode(
            episode_id=i, world_id=world_id, world_seed=world.seed,
            start_pose=pose, goal_sequence=sequence,
            seed=int(np.random.default_rng([seed, i, 7]).integers(2 ** 31))))
    return episodes


def run_episode(episode: Episode, world: World, codebook: Codebook,
                cfg: Config, trace=None) -> EpisodeResult:
    """Execute one episode; results truncate at the first failed object."""
    agent = SearchAgent(world, codebook, cfg, episode.start_pose,
                        seed=episode.seed, trace=trace)
    result = EpisodeResult(episode_id=episode.episode_id,
                           n_goals=len(episode.goal_sequence))
    for k, category in enumerate(episode.goal_sequence):
        if k > 0 and not cfg.benchmark.reuse_map:
            agent.reset_memory()
        oracle_len = oracle_shortest_path(
            world, agent.agent.pose, category,
            success_radius=cfg.benchmark.success_radius)
        leg = agent.search(category, cfg.benchmark.step_budget)
        result.objects.append(ObjectResult(
            category=category, found=leg.found,
            agent_path_length=leg.path_length,
            oracle_path_length=oracle_len,
            reason=leg.reason, steps=leg.steps))
        if not leg.found:
            break
    return result


def _ratio(oracle: float, agent: float) -> float:
    denom = max(agent, oracle)
    if denom <= 0:
        return 1.0  # degenerate: goal satisfied with no movement required
    return oracle / denom


def compute_metrics(results: list[EpisodeResult]) -> Metrics:
    """Means over episodes of SR, SPL, PR, PPL (SPL/PPL use the
    max(agent, oracle) denominator so per-episode ratios stay <= 1)."""
    if not results:
        raise ValueError("no episode results")
    sr = spl = pr = ppl = 0.0
    for ep in results:
        k = ep.n_goals
        found = [o for o in ep.objects if o.found]
        success = len(found) == k
        sr += 1.0 if success else 0.0
        if success:
            spl += _ratio(sum(o.oracle_path_length for o in ep.objects),
                          sum(o.agent_path_length for o in ep.objects))
        pr_ep = len(found) / k
        pr += pr_ep
        if found:
            ppl += pr_ep * _ratio(
                sum(o.oracle_path_length for o in found),
                sum(o.agent_path_length for o in found))
    n = len(results)
    return Metrics(sr=sr / n, spl=spl / n, pr=pr / n, ppl=ppl / n)


def per_object_spl(results: list[EpisodeResult]) -> list[dict]:
    """Per-goal-index SPL conditioned on the previous object's success
    (truncation means exactly the attempted legs appear at each index)."""
    max_k = max((ep.n_goals for ep in results), default=0)
    rows = []
    for k in range(max_k):
        legs = [ep.objects[k] for ep in results if len(ep.objects) > k]
        if legs:
            vals = [(_ratio(o.oracle_path_length, o.agent_path_length)
                     if o.found else 0.0) for o in legs]
            rows.append({"object_index": k + 1, "n": len(legs),
                         "spl": float(np.mean(vals))})
        else:
            rows.append({"object_index": k + 1, "n": 0, "spl": 0.0})
    return rows


def build_report(results: list[EpisodeResult]) -> dict:
    doc = {"n_episodes": len(results)}
    if results:
        m = compute_metrics(results)
        doc["metrics"] = {"SR": m.sr, "SPL": m.spl, "PR": m.pr, "PPL": m.ppl}
        doc["per_object_spl"] = per_object_spl(results)
        doc["termination_reasons"] = reason_counts(results)
    else:
        doc["metrics"] = None
        doc["warning"] = "zero episodes"
    return doc


def reason_counts(results: list[EpisodeResult]) -> dict:
    counts: dict[str, int] = {}
    for ep in results:
        for o in ep.objects:
            counts[o.reason] = counts.get(o.reason, 0) + 1
    return dict(sorted(counts.items()))


def write_report(results: list[EpisodeResult], json_path,
                 png_path=None) -> dict:
    """Structured report plus an optional per-object-index SPL bar chart."""
    doc = build_report(results)
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    if png_path is not None and results:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        rows = doc["per_object_spl"]
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar([r["object_index"] for r in rows],
               [r["spl"] for r in rows], color="#b03030")
        ax.set_xlabel("object number")
        ax.set_ylabel("SPL")
        ax.set_xticks([r["object_index"] for r in rows])
        ax.set_ylim(0, 1)
        fig.tight_layout()
        fig.savefig(png_path, dpi=120)
        plt.close(fig)
    return doc


# ----------------------------------------------------------- result logging

def result_records(result: EpisodeResult) -> list[dict]:
    """One flat record per (episode, object) for the line-delimited log."""
    return [
        {
            "episode_id": result.episode_id,
            "object_index": k + 1,
            "n_goals": result.n_goals,
            "category": o.category,
            "found": o.found,
            "agent_path_length": round(o.agent_path_length, 6),
            "oracle_path_length": round(o.oracle_path_length, 6),
            "reason": o.reason,
            "steps": o.steps,
        }
        for k, o in enumerate(result.objects)
    ]


def write_result_log(results: list[EpisodeResult], path) -> None:
    with open(path, "w") as fh:
        for ep in sorted(results, key=lambda r: r.episode_id):
            for rec in result_records(ep):
                fh.write(json.dumps(rec, sort_keys=True))
                fh.write("\n")


def read_result_log(path) -> list[EpisodeResult]:
    by_episode: dict[int, EpisodeResult] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ep = by_episode.setdefault(rec["episode_id"], EpisodeResult(
                episode_id=rec["episode_id"], n_goals=rec["n_goals"]))
            ep.objects.append(ObjectResult(
                category=rec["category"], found=rec["found"],
                agent_path_length=rec["agent_path_length"],
                oracle_path_length=rec["oracle_path_length"],
                reason=rec["reason"], steps=rec["steps"]))
    return [by_episode[k] for k in sorted(by_episode)]
