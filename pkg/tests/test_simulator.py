import math

import numpy as np
import pytest
from scipy import ndimage

from semnav.planning import Path, astar, path_length
from semnav.simulator import (
    AgentState,
    DetectorParams,
    GenerationError,
    InvalidPose,
    World,
    WorldGenParams,
    WorldObject,
    generate_world,
    load_world,
    raycast_grid,
    render_observation,
    save_world,
    simulate_detection,
    step_agent,
)

from oracles import raymarch_fine


def box_world(n=20, cell_size=0.25):
    """Free box with solid border walls."""
    occ = np.zeros((n, n), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    sem = np.zeros((n, n), dtype=np.int16)
    return World(occupancy=occ, semantic=sem, labels=["void"],
                 objects=[], cell_size=cell_size, seed=0)


def add_object(world, label, cells):
    cells = np.asarray(cells)
    if label not in world.labels:
        world.labels.append(label)
    lid = world.labels.index(label)
    world.occupancy[cells[:, 0], cells[:, 1]] = True
    world.semantic[cells[:, 0], cells[:, 1]] = lid
    cs = world.cell_size
    centroid = ((cells[:, 0].mean() + 0.5) * cs, (cells[:, 1].mean() + 0.5) * cs)
    world.objects.append(WorldObject(label=label, cells=cells,
                                     centroid=centroid))


SMALL = WorldGenParams(extent=10.0, cells_per_meter=4.0, n_rooms=3,
                       room_min=2.5, room_max=4.0,
                       categories=("chair", "table", "bed"),
                       instances_per_category=1)


# -------------------------------------------------------------- generation

def test_generate_world_deterministic():
    a = generate_world(SMALL, seed=5)
    b = generate_world(SMALL, seed=5)
    assert np.array_equal(a.occupancy, b.occupancy)
    assert np.array_equal(a.semantic, b.semantic)
    assert [o.label for o in a.objects] == [o.label for o in b.objects]
    c = generate_world(SMALL, seed=6)
    assert not np.array_equal(a.occupancy, c.occupancy)


def test_generate_world_one_room_object_inside():
    params = WorldGenParams(extent=8.0, cells_per_meter=4.0, n_rooms=1,
                            room_min=4.0, room_max=5.0,
                            categories=("chair",))
    w = generate_world(params, seed=1)
    assert len(w.objects) == 1
    obj = w.objects[0]
    # the object's cells are opaque, labeled, and surrounded by free space
    for x, y in obj.cells:
        assert w.occupancy[x, y]
        assert w.labels[w.semantic[x, y]] == "chair"
    grown = ndimage.binary_dilation(
        np.isin(w.semantic, [1]), structure=np.ones((3, 3), bool))
    assert (grown & ~w.occupancy).any()


def test_generate_world_infeasible_raises():
    params = WorldGenParams(extent=5.0, cells_per_meter=4.0, n_rooms=12,
                            room_min=3.0, room_max=4.0)
    with pytest.raises(GenerationError):
        generate_world(params, seed=0)


def test_generate_world_invariant_sweep():
    struct = np.ones((3, 3), bool)
    for seed in range(1000):
        w = generate_world(SMALL, seed=seed)
        free = ~w.occupancy
        assert free.any()
        _, n_comp = ndimage.label(free, structure=struct)
        assert n_comp == 1           # one navigable component
        for obj in w.objects:
            assert w.occupancy[obj.cells[:, 0], obj.cells[:, 1]].all()
            lid = w.labels.index(obj.label)
            assert (w.semantic[obj.cells[:, 0], obj.cells[:, 1]] == lid).all()
        # borders stay walled
        assert w.occupancy[0, :].all() and w.occupancy[-1, :].all()
        assert w.occupancy[:, 0].all() and w.occupancy[:, -1].all()


def test_generate_world_co_location_bias():
    params = WorldGenParams(
        extent=12.0, cells_per_meter=4.0, n_rooms=3, room_min=3.0,
        room_max=4.5, categories=("chair", "table"),
        co_location_groups=(("chair", "table"),), co_location_bias=1.0)
    together = 0
    for seed in range(20):
        w = generate_world(params, seed=seed)
        a, b = w.objects[0].centroid, w.objects[1].centroid
        if math.hypot(a[0] - b[0], a[1] - b[1]) < 4.5:
            together += 1
    assert together >= 16  # full bias puts group members in one room


# -------------------------------------------------------------- raycasting

def test_raycast_wall_straight_ahead():
    w = box_world(n=24, cell_size=0.25)  # walls at x in [5.75, 6.0)
    pose = (3.75, 3.0, 0.0)              # wall surface 2.0 m ahead
    rays = raycast_grid(w, pose, n_rays=9, fov=0.2, max_range=10.0)
    center = 4
    assert rays.valid[center]
    assert rays.depth[center] == pytest.approx(2.0, abs=w.cell_size)


def test_raycast_empty_world_censors_everything():
    occ = np.zeros((16, 16), dtype=bool)
    w = World(occupancy=occ, semantic=np.zeros((16, 16), np.int16),
              labels=["void"], objects=[], cell_size=0.25, seed=0)
    rays = raycast_grid(w, (2.0, 2.0, 0.3), 16, 1.5, max_range=1.0)
    assert not rays.valid.any()
    assert np.all(rays.depth == 1.0)
    assert np.all(rays.hit_cells == -1)


def test_raycast_invalid_pose():
    w = box_world()
    with pytest.raises(InvalidPose):
        raycast_grid(w, (0.1, 0.1, 0.0), 9, 1.0, 5.0)


def test_raycast_matches_fine_marcher():
    rng = np.random.default_rng(17)
    for seed in range(5):
        w = generate_world(SMALL, seed=seed)
        free = np.argwhere(~w.occupancy)
        for _ in range(6):
            cell = free[int(rng.integers(len(free)))]
            pose = ((cell[0] + 0.5) * w.cell_size,
                    (cell[1] + 0.5) * w.cell_size,
                    float(rng.uniform(-math.pi, math.pi)))
            rays = raycast_grid(w, pose, 16, 1.8, max_range=6.0)
            angles = pose[2] + (-0.9 + (np.arange(16) + 0.5) * (1.8 / 16))
            for j in range(16):
                oracle = raymarch_fine(w.occupancy, w.cell_size,
                                       pose[:2], angles[j], 6.0)
                if rays.valid[j] and oracle is not None:
                    assert abs(rays.depth[j] - oracle) <= w.cell_size
                elif rays.valid[j]:
                    # oracle censored, sim hit: only possible right at range
                    assert rays.depth[j] >= 6.0 - w.cell_size
                elif oracle is not None:
                    assert oracle >= 6.0 - w.cell_size


def test_raycast_depth_positive_and_bounded():
    w = generate_world(SMALL, seed=3)
    free = np.argwhere(~w.occupancy)
    rng = np.random.default_rng(0)
    for _ in range(20):
        cell = free[int(rng.integers(len(free)))]
        pose = ((cell[0] + 0.5) * w.cell_size, (cell[1] + 0.5) * w.cell_size,
                float(rng.uniform(-math.pi, math.pi)))
        rays = raycast_grid(w, pose, 24, 2.0, max_range=5.0)
        assert np.all(rays.depth > 0)
        assert np.all(rays.depth <= 5.0)


def test_render_observation_labels():
    w = box_world(n=24, cell_size=0.25)
    add_object(w, "chair", [(12, 12), (12, 13), (13, 12), (13, 13)])
    pose = (1.5, 3.125, 0.0)  # looking straight at the object rows
    obs = render_observation(w, pose, 9, 0.15, 10.0)
    assert obs.hit_labels.shape == (1, 9)
    assert "chair" in obs.hit_labels
    assert obs.depth.shape == (1, 9)
    assert (obs.depth > 0).all()


# ------------------------------------------------------------ agent stepping

def test_step_agent_straight_path_four_steps():
    w = box_world(n=24, cell_size=0.25)
    cells = [(4, 8), (5, 8), (6, 8), (7, 8), (8, 8)]  # 1.0 m straight
    path = Path(cells=cells, length=path_length(cells, 0.25))
    assert path.length == pytest.approx(1.0)
    state = AgentState(pose=(4.5 * 0.25, 8.5 * 0.25, 0.0))
    for _ in range(4):
        state = step_agent(w, state, path, 0.25)
    assert state.steps_taken == 4
    assert state.path_length == pytest.approx(1.0, abs=1e-9)
    assert state.pose[0] == pytest.approx(8.5 * 0.25, abs=1e-9)
    assert state.pose[1] == pytest.approx(8.5 * 0.25, abs=1e-9)
    # further steps do not move past the end
    state = step_agent(w, state, path, 0.25)
    assert state.path_length == pytest.approx(1.0, abs=1e-9)


def test_step_agent_accumulates_path_length():
    w = box_world(n=24, cell_size=0.25)
    cells = [(4, 4), (5, 5), (6, 6), (7, 7), (8, 8), (9, 8)]
    path = Path(cells=cells, length=path_length(cells, 0.25))
    state = AgentState(pose=(4.5 * 0.25, 4.5 * 0.25, 0.0))
    while True:
        nxt = step_agent(w, state, path, 0.2)
        if nxt.path_length - state.path_length < 1e-9:
            break
        state = nxt
    assert state.path_length == pytest.approx(path.length, abs=1e-9)


def test_step_agent_heading_follows_motion():
    w = box_world(n=24, cell_size=0.25)
    cells = [(4, 8), (5, 8)]
    path = Path(cells=cells, length=path_length(cells, 0.25))
    state = AgentState(pose=(4.5 * 0.25, 8.5 * 0.25, 2.0))
    state = step_agent(w, state, path, 0.1)
    assert state.pose[2] == pytest.approx(0.0, abs=1e-9)


def test_step_agent_never_enters_occupied_sweep():
    rng = np.random.default_rng(8)
    worlds = [generate_world(SMALL, seed=s) for s in range(12)]
    total_steps = 0
    while total_steps < 10_000:
        w = worlds[int(rng.integers(len(worlds)))]
        nav = ~ndimage.binary_dilation(w.occupancy, np.ones((3, 3), bool))
        free = np.argwhere(nav)
        a = tuple(int(v) for v in free[int(rng.integers(len(free)))])
        b = tuple(int(v) for v in free[int(rng.integers(len(free)))])
        try:
            path = astar(nav, a, b, w.cell_size, goal_snap_radius=0.0)
        except Exception:
            continue
        state = AgentState(pose=((a[0] + 0.5) * w.cell_size,
                                 (a[1] + 0.5) * w.cell_size, 0.0))
        for _ in range(400):
            nxt = step_agent(w, state, path, float(rng.uniform(0.05, 0.4)))
            total_steps += 1
            cell = w.cell_of(nxt.pose[0], nxt.pose[1])
            assert not w.occupancy[cell]
            assert nxt.path_length >= state.path_length
            if nxt.path_length - state.path_length < 1e-9:
                break
            state = nxt
    assert total_steps >= 10_000


# ---------------------------------------------------------------- detection

def chair_world():
    w = box_world(n=24, cell_size=0.25)
    add_object(w, "chair", [(12, 11), (12, 12), (13, 11), (13, 12)])
    return w


def test_detector_true_positive_in_view():
    w = chair_world()
    pose = (1.5, 3.0, 0.0)
    rays = raycast_grid(w, pose, 32, 1.2, 10.0)
    obs = render_observation(w, pose, 32, 1.2, 10.0, rays=rays)
    det = simulate_detection(w, obs, "chair",
                             DetectorParams(tp_rate=1.0, fp_rate=0.0,
                                            max_range=10.0, seed=1),
                             frame_index=0, rays=rays)
    assert det is not None
    assert w.labels[w.semantic[det.cell]] == "chair"
    assert 0.0 <= det.confidence <= 1.0


def test_detector_none_when_target_out_of_view():
    w = chair_world()
    pose = (1.5, 3.0, math.pi)  # facing away
    rays = raycast_grid(w, pose, 32, 1.2, 10.0)
    obs = render_observation(w, pose, 32, 1.2, 10.0, rays=rays)
    det = simulate_detection(w, obs, "chair",
                             DetectorParams(tp_rate=1.0, fp_rate=0.0,
                                            max_range=10.0, seed=1),
                             frame_index=0, rays=rays)
    assert det is None


def test_detector_range_limits_true_positives():
    w = chair_world()
    pose = (1.5, 3.0, 0.0)
    rays = raycast_grid(w, pose, 32, 1.2, 10.0)
    obs = render_observation(w, pose, 32, 1.2, 10.0, rays=rays)
    det = simulate_detection(w, obs, "chair",
                             DetectorParams(tp_rate=1.0, fp_rate=0.0,
                                            max_range=1.0, seed=1),
                             frame_index=0, rays=rays)
    assert det is None  # object ~1.6 m away, beyond detector range


def test_detector_false_positive_rate_monte_carlo():
    # no chair anywhere: every detection is a false positive
    w = box_world(n=24, cell_size=0.25)
    pose = (3.0, 3.0, 0.5)
    rays = raycast_grid(w, pose, 16, 1.2, 10.0)
    obs = render_observation(w, pose, 16, 1.2, 10.0, rays=rays)
    params = DetectorParams(tp_rate=1.0, fp_rate=0.3, max_range=10.0, seed=7)
    fired = 0
    trials = 10_000
    for frame in range(trials):
        det = simulate_detection(w, obs, "chair", params,
                                 frame_index=frame, rays=rays)
        if det is not None:
            fired += 1
            assert w.occupancy[det.cell]
    assert fired / trials == pytest.approx(0.30, abs=0.01)


def test_detector_deterministic_per_seed_and_frame():
    w = chair_world()
    pose = (1.5, 3.0, 0.0)
    rays = raycast_grid(w, pose, 32, 1.2, 10.0)
    obs = render_observation(w, pose, 32, 1.2, 10.0, rays=rays)
    params = DetectorParams(tp_rate=0.5, fp_rate=0.2, max_range=10.0, seed=3)
    a = [simulate_detection(w, obs, "chair", params, frame_index=i, rays=rays)
         for i in range(50)]
    b = [simulate_detection(w, obs, "chair", params, frame_index=i, rays=rays)
         for i in range(50)]
    assert a == b


# ------------------------------------------------------------ serialization

def test_world_roundtrip(tmp_path):
    w = generate_world(SMALL, seed=9)
    path = tmp_path / "world.json"
    save_world(path, w)
    loaded = load_world(path)
    assert np.array_equal(loaded.occupancy, w.occupancy)
    assert np.array_equal(loaded.semantic, w.semantic)
    assert loaded.labels == w.labels
    assert loaded.cell_size == w.cell_size
    assert loaded.seed == w.seed
    assert len(loaded.objects) == len(w.objects)
    for a, b in zip(loaded.objects, w.objects):
        assert a.label == b.label
        assert np.array_equal(a.cells, b.cells)
        assert a.centroid == pytest.approx(b.centroid)
