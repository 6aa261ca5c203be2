import math

import numpy as np
import pytest

from semnav.mapping import (
    CellUpdate,
    PosedObservation,
    UpdateModel,
    bayesian_fuse,
    compute_pixel_variances,
    create_map,
    integrate_observation,
    load_state,
    memory_estimate_bytes,
    project_and_aggregate,
    query_similarity,
    reset_search_layer,
    save_state,
    spatial_blur,
)

from oracles import dense_gaussian_scatter

RNG = np.random.default_rng


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def make_obs(depth, pose=(0.0, 0.0, 0.0), fov=0.01, max_range=100.0,
             features=None, valid=None):
    depth = np.atleast_2d(np.asarray(depth, dtype=float))
    if valid is None:
        valid = np.ones_like(depth, dtype=bool)
    return PosedObservation(pose=pose, depth=depth, valid=valid,
                            fov=fov, max_range=max_range, features=features)


# ---------------------------------------------------------------- create_map

def test_create_map_paper_scale_dims():
    m = create_map(50.0, 50.0, 10.0, 768, 1.0)
    assert (m.n_x, m.n_y) == (500, 500)
    assert m.F.shape == (500, 500, 768)
    assert m.F.dtype == np.float32
    assert not m.observed.any()
    assert np.all(m.sigma2 == 1.0) and np.all(m.sigma2_E == 1.0)


def test_create_map_minimal():
    m = create_map(1.0, 1.0, 1.0, 4, 1.0)
    assert (m.n_x, m.n_y) == (1, 1)
    assert np.array_equal(m.F[0, 0], np.zeros(4, dtype=np.float32))


@pytest.mark.parametrize("args", [
    (0.0, 1.0, 1.0, 4, 1.0),
    (1.0, -1.0, 1.0, 4, 1.0),
    (1.0, 1.0, 0.0, 4, 1.0),
    (1.0, 1.0, 1.0, 0, 1.0),
    (1.0, 1.0, 1.0, 4, 0.0),
])
def test_create_map_rejects_nonpositive(args):
    with pytest.raises(ValueError):
        create_map(*args)


def test_memory_estimate_matches_reported_footprint():
    est = memory_estimate_bytes(500, 500, 768)
    assert 650e6 <= est <= 800e6
    m = create_map(50.0, 50.0, 10.0, 768, 1.0)
    assert m.memory_estimate() == est


# --------------------------------------------------- compute_pixel_variances

def test_pixel_variance_flat_optimal_clamps_to_floor():
    depth = np.full((3, 5), 2.5)
    var, ok = compute_pixel_variances(depth, 2.5, eps_var=1e-3)
    assert ok.all()
    assert np.allclose(var, 1e-3)


def test_pixel_variance_step_matches_hand_gradients():
    # 3x3 patch at d_opt with a 1 m step in the last column.
    d_opt = 2.5
    depth = np.array([
        [2.5, 2.5, 3.5],
        [2.5, 2.5, 3.5],
        [2.5, 2.5, 3.5],
    ])
    var, _ = compute_pixel_variances(depth, d_opt, eps_var=1e-3)
    # Independent evaluation: central differences inside, one-sided at
    # borders, leakage tanh(gx^2 + gy^2), distance exp(((d_opt - D)/2)^2).
    for i in range(3):
        for j in range(3):
            if j == 0:
                gx = depth[i, 1] - depth[i, 0]
            elif j == 2:
                gx = depth[i, 2] - depth[i, 1]
            else:
                gx = (depth[i, 2] - depth[i, 0]) / 2.0
            gy = 0.0 if i in (0, 2) else 0.0  # columns constant vertically
            expect = math.tanh(gx * gx + gy * gy) * math.exp(
                ((d_opt - depth[i, j]) / 2.0) ** 2)
            expect = max(expect, 1e-3)
            assert var[i, j] == pytest.approx(expect, rel=1e-12)


def test_pixel_variance_distance_term_is_exp_of_squared_half_error():
    # Linear ramp with slope 1 gives tanh(1) leakage everywhere, so the
    # distance factor is observable; at D = d_opt + 2 it must be exp(1).
    d_opt = 2.5
    depth = np.array([[d_opt + 1.0, d_opt + 2.0, d_opt + 3.0]])
    var, _ = compute_pixel_variances(depth, d_opt, eps_var=1e-3)
    assert var[0, 1] == pytest.approx(math.tanh(1.0) * math.exp(1.0), rel=1e-12)
    assert math.exp(1.0) == pytest.approx(2.71828, abs=1e-5)


def test_pixel_variance_alternative_exponent_form():
    d_opt = 2.5
    depth = np.array([[d_opt + 1.0, d_opt + 2.0, d_opt + 3.0]])
    var, _ = compute_pixel_variances(depth, d_opt, eps_var=1e-3,
                                     exponent_form="error-squared-half")
    assert var[0, 1] == pytest.approx(math.tanh(1.0) * math.exp(2.0), rel=1e-12)


def test_pixel_variance_flags_invalid_depth():
    depth = np.array([[1.0, 0.0, np.nan, -2.0]])
    _, ok = compute_pixel_variances(depth, 2.5)
    assert ok.tolist() == [[True, False, False, False]]


def test_pixel_variance_single_row_has_no_vertical_term():
    depth = np.array([[2.0, 2.0, 2.0]])
    var, _ = compute_pixel_variances(depth, 2.0)
    assert np.allclose(var, 1e-3)  # zero gradient row, clamped


# ---------------------------------------------------- project_and_aggregate

def test_project_two_pixels_equal_variance_average():
    m = create_map(4.0, 4.0, 1.0, 3, 1.0)
    u, v = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    obs = make_obs([[2.0, 2.0]], pose=(0.5, 0.5, 0.0), fov=0.001)
    feats = np.stack([u, v])[None, :, :]
    updates, discarded = project_and_aggregate(
        m, obs, feats, np.array([[1.0, 1.0]]))
    assert discarded == 0
    assert len(updates) == 1
    assert np.allclose(updates[0].feature, (u + v) / 2.0)
    assert updates[0].variance == pytest.approx(1.0)


def test_project_inverse_variance_weighting():
    m = create_map(4.0, 4.0, 1.0, 3, 1.0)
    u, v = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    obs = make_obs([[2.0, 2.0]], pose=(0.5, 0.5, 0.0), fov=0.001)
    feats = np.stack([u, v])[None, :, :]
    updates, _ = project_and_aggregate(m, obs, feats, np.array([[1.0, 3.0]]))
    # weights 1/1 and 1/3 normalize to 3/4 and 1/4; variance is the mean.
    assert np.allclose(updates[0].feature, 0.75 * u + 0.25 * v)
    assert updates[0].variance == pytest.approx(2.0)


def test_project_literal_variance_weights_flag():
    m = create_map(4.0, 4.0, 1.0, 3, 1.0)
    u, v = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    obs = make_obs([[2.0, 2.0]], pose=(0.5, 0.5, 0.0), fov=0.001)
    feats = np.stack([u, v])[None, :, :]
    updates, _ = project_and_aggregate(m, obs, feats, np.array([[1.0, 3.0]]),
                                       literal_variance_weights=True)
    assert np.allclose(updates[0].feature, 0.25 * u + 0.75 * v)


def test_project_single_pixel_matches_pinhole_oracle():
    m = create_map(5.0, 5.0, 10.0, 2, 1.0)
    obs = make_obs([[2.0]], pose=(0.0, 0.0, 0.0), fov=0.01)
    feats = np.ones((1, 1, 2))
    updates, _ = project_and_aggregate(m, obs, feats, np.array([[1.0]]))
    assert len(updates) == 1
    # Independent projection: the single ray of a 1-wide frame points
    # straight ahead, so the point is pose + 2 m along the heading.
    angle = -0.01 / 2 + 0.5 * 0.01
    px, py = 2.0 * math.cos(angle), 2.0 * math.sin(angle)
    expect = (int(math.floor(px * 10)), int(math.floor(py * 10)))
    assert updates[0].cell == expect == (20, 0)
    cx, cy = (expect[0] + 0.5) * 0.1, (expect[1] + 0.5) * 0.1
    assert updates[0].camera_distance == pytest.approx(math.hypot(cx, cy))


def test_project_random_frames_match_bruteforce_projection():
    rng = RNG(3)
    m = create_map(8.0, 8.0, 4.0, 2, 1.0)
    for _ in range(20):
        w = int(rng.integers(3, 12))
        pose = (float(rng.uniform(1, 7)), float(rng.uniform(1, 7)),
                float(rng.uniform(-math.pi, math.pi)))
        fov = float(rng.uniform(0.3, 2.0))
        depth = rng.uniform(0.2, 4.0, size=(1, w))
        obs = make_obs(depth, pose=pose, fov=fov)
        feats = rng.normal(size=(1, w, 2))
        updates, discarded = project_and_aggregate(
            m, obs, feats, np.ones((1, w)))
        got = {u.cell for u in updates}
        expect = set()
        n_out = 0
        for j in range(w):
            ang = pose[2] - fov / 2 + (j + 0.5) * fov / w
            x = pose[0] + depth[0, j] * math.cos(ang)
            y = pose[1] + depth[0, j] * math.sin(ang)
            c = (int(math.floor(x * 4)), int(math.floor(y * 4)))
            if 0 <= c[0] < m.n_x and 0 <= c[1] < m.n_y:
                expect.add(c)
            else:
                n_out += 1
        assert got == expect
        assert discarded == n_out


def test_project_discards_out_of_bounds_with_counter():
    m = create_map(1.0, 1.0, 1.0, 2, 1.0)
    obs = make_obs([[5.0, 0.2]], pose=(0.5, 0.5, 0.0), fov=0.01)
    updates, discarded = project_and_aggregate(
        m, obs, np.ones((1, 2, 2)), np.ones((1, 2)))
    assert discarded == 1
    assert len(updates) == 1


def test_project_empty_when_no_valid_pixels():
    m = create_map(2.0, 2.0, 1.0, 2, 1.0)
    obs = make_obs([[0.0, np.nan]], pose=(0.5, 0.5, 0.0))
    updates, discarded = project_and_aggregate(
        m, obs, np.ones((1, 2, 2)), np.ones((1, 2)))
    assert updates == [] and discarded == 0


# ----------------------------------------------------------- spatial_blur

def _updates_from(cells, feats, variances, distances):
    return [CellUpdate(cell=c, feature=np.asarray(f, dtype=float),
                       variance=v, camera_distance=d)
            for c, f, v, d in zip(cells, feats, variances, distances)]


def test_blur_zero_p_is_identity():
    ups = _updates_from([(3, 4), (5, 5)], [[1.0, 2.0], [3.0, 4.0]],
                        [0.5, 2.0], [2.0, 7.0])
    out = spatial_blur(ups, 0.0, 3.0, grid_shape=(10, 10), resolution=1.0)
    assert len(out) == 2
    lookup = {tuple(c): i for i, c in enumerate(out.cells)}
    for u in ups:
        i = lookup[u.cell]
        assert np.array_equal(out.features[i], u.feature)
        assert out.variances[i] == u.variance


def test_blur_uniform_field_unchanged_on_interior():
    n = 11
    feat = np.array([0.3, -0.7])
    ups = _updates_from([(x, y) for x in range(n) for y in range(n)],
                        [feat] * n * n, [0.8] * n * n, [2.0] * n * n)
    p = 0.1
    out = spatial_blur(ups, p, 3.0, grid_shape=(n, n), resolution=1.0)
    r = max(1, math.ceil(3.0 * math.sqrt(p) * 2.0))
    dense = np.zeros((n, n, 2))
    var = np.zeros((n, n))
    for c, f, v in zip(out.cells, out.features, out.variances):
        dense[c[0], c[1]] = f
        var[c[0], c[1]] = v
    interior = dense[r:n - r, r:n - r]
    assert np.allclose(interior, feat, atol=1e-9)
    assert np.allclose(var[r:n - r, r:n - r], 0.8, atol=1e-9)


def test_blur_single_spike_matches_dense_oracle():
    ups = _updates_from([(16, 16)], [[1.0]], [0.7], [2.0])
    p = 0.25  # sigma_d^2 = 1 at 2 m, resolution 1
    out = spatial_blur(ups, p, 3.0, grid_shape=(32, 32), resolution=1.0)
    feat, var, mass = dense_gaussian_scatter(ups, p, 3.0, (32, 32), 1.0)
    got = np.zeros((32, 32))
    for c, f in zip(out.cells, out.features):
        got[c[0], c[1]] = f[0]
    assert np.max(np.abs(got - feat[:, :, 0])) < 1e-6
    # scattered mass of a single interior update sums to 1 after
    # truncation renormalization
    assert mass.sum() == pytest.approx(1.0, abs=1e-6)
    assert got.sum() == pytest.approx(1.0, abs=1e-6)


def test_blur_random_fields_match_dense_oracle():
    rng = RNG(11)
    for _ in range(25):
        n_x = int(rng.integers(4, 24))
        n_y = int(rng.integers(4, 24))
        k = int(rng.integers(1, 12))
        flat = rng.choice(n_x * n_y, size=k, replace=False)
        cells = [(int(c // n_y), int(c % n_y)) for c in flat]
        ups = _updates_from(
            cells,
            rng.normal(size=(k, 3)),
            rng.uniform(0.1, 3.0, size=k),
            rng.uniform(0.0, 4.0, size=k),
        )
        p = float(rng.uniform(0.0, 0.4))
        out = spatial_blur(ups, p, 3.0, grid_shape=(n_x, n_y), resolution=1.0)
        feat, var, mass = dense_gaussian_scatter(ups, p, 3.0, (n_x, n_y), 1.0)
        got_f = np.zeros((n_x, n_y, 3))
        got_v = np.zeros((n_x, n_y))
        got_m = np.zeros((n_x, n_y), dtype=bool)
        for c, f, v in zip(out.cells, out.features, out.variances):
            got_f[c[0], c[1]] = f
            got_v[c[0], c[1]] = v
            got_m[c[0], c[1]] = True
        assert np.array_equal(got_m, mass > 0)
        assert np.max(np.abs(got_f - feat)) < 1e-6
        assert np.max(np.abs(got_v - var)) < 1e-6


# ---------------------------------------------------------- bayesian_fuse

def _sparse(cells, feats, variances):
    return type(spatial_blur([], 0, 1, grid_shape=(1, 1), resolution=1))(
        cells=np.asarray(cells, dtype=np.int64),
        features=np.asarray(feats, dtype=float),
        variances=np.asarray(variances, dtype=float),
    )


def test_fuse_symmetric_average():
    m = create_map(4.0, 4.0, 1.0, 2, 1.0)
    u = np.array([1.0, 0.0], dtype=np.float32)
    v = np.array([0.0, 1.0], dtype=np.float32)
    m.F[1, 1] = u
    bayesian_fuse(m, _sparse([[1, 1]], [v], [1.0]))
    assert np.allclose(m.F[1, 1], (u + v) / 2.0)
    assert m.sigma2[1, 1] == pytest.approx(0.5)
    assert m.observed[1, 1]


def test_fuse_perfect_observation_limit():
    m = create_map(4.0, 4.0, 1.0, 2, 1.0)
    v = np.array([3.0, -1.0])
    bayesian_fuse(m, _sparse([[0, 0]], [v], [1e-9]), eps_var=1e-9)
    assert np.allclose(m.F[0, 0], v, rtol=1e-6)


def test_fuse_uninformative_observation_limit():
    m = create_map(4.0, 4.0, 1.0, 2, 1.0)
    m.F[2, 2] = np.array([1.0, 1.0], dtype=np.float32)
    before_f = m.F[2, 2].copy()
    before_s = float(m.sigma2[2, 2])
    bayesian_fuse(m, _sparse([[2, 2]], [[9.0, 9.0]], [1e6]))
    assert np.allclose(m.F[2, 2], before_f, atol=1e-4)
    assert m.sigma2[2, 2] == pytest.approx(before_s, rel=1e-4)


def test_fuse_clamps_nonpositive_observation_variance():
    m = create_map(4.0, 4.0, 1.0, 2, 1.0)
    bayesian_fuse(m, _sparse([[0, 0]], [[1.0, 0.0]], [0.0]), eps_var=1e-3)
    k = 1.0 / (1e-3 + 1.0)
    # float32 storage: the 1 - k cancellation costs ~3 digits
    assert m.sigma2[0, 0] == pytest.approx((1 - k) * 1.0, rel=1e-3)
    assert m.sigma2[0, 0] > 0


def test_fuse_updates_search_layer_with_own_gain():
    m = create_map(4.0, 4.0, 1.0, 2, 1.0)
    m.sigma2_E[1, 1] = 0.5
    m.sigma2[1, 1] = 0.25
    bayesian_fuse(m, _sparse([[1, 1]], [[1.0, 0.0]], [1.0]))
    assert m.sigma2[1, 1] == pytest.approx(0.25 * (1 - 0.25 / 1.25), rel=1e-6)
    assert m.sigma2_E[1, 1] == pytest.approx(0.5 * (1 - 0.5 / 1.5), rel=1e-6)


def test_fuse_contraction_and_fixed_point_small():
    rng = RNG(5)
    m = create_map(4.0, 4.0, 1.0, 3, 1.0)
    for _ in range(200):
        var = float(rng.uniform(1e-3, 1e3))
        before = float(m.sigma2[1, 2])
        feat = m.F[1, 2].astype(float).copy()
        bayesian_fuse(m, _sparse([[1, 2]], [feat], [var]))
        assert m.sigma2[1, 2] < before
        assert np.array_equal(m.F[1, 2], feat.astype(np.float32))


# ------------------------------------------------------- query_similarity

def test_similarity_self_is_one():
    m = create_map(4.0, 4.0, 1.0, 3, 1.0)
    q = unit([1.0, 2.0, -1.0])
    m.F[2, 3] = q.astype(np.float32)
    m.observed[2, 3] = True
    s = query_similarity(m, q)
    assert s[2, 3] == pytest.approx(1.0, abs=1e-6)


def test_similarity_orthogonal_is_zero():
    m = create_map(4.0, 4.0, 1.0, 2, 1.0)
    m.F[1, 1] = np.array([1.0, 0.0], dtype=np.float32)
    s = query_similarity(m, np.array([0.0, 1.0]))
    assert s[1, 1] == pytest.approx(0.0, abs=1e-7)


def test_similarity_unobserved_cells_are_exactly_zero():
    m = create_map(4.0, 4.0, 1.0, 2, 1.0)
    s = query_similarity(m, np.array([1.0, 1.0]))
    assert np.all(s == 0.0)


def test_similarity_bounds_and_dim_mismatch():
    rng = RNG(9)
    m = create_map(4.0, 4.0, 1.0, 4, 1.0)
    m.F[:] = rng.normal(size=m.F.shape).astype(np.float32)
    s = query_similarity(m, rng.normal(size=4))
    assert np.all(s >= -1.0) and np.all(s <= 1.0)
    with pytest.raises(ValueError):
        query_similarity(m, np.ones(3))


# ---------------------------------------------------- reset_search_layer

def test_reset_search_layer_restores_prior_only():
    m = create_map(4.0, 4.0, 1.0, 2, 1.0)
    bayesian_fuse(m, _sparse([[1, 1]], [[1.0, 0.0]], [0.5]))
    f_before = m.F.copy()
    s_before = m.sigma2.copy()
    reset_search_layer(m)
    assert np.all(m.sigma2_E == m.prior_variance)
    assert np.array_equal(m.F, f_before)
    assert np.array_equal(m.sigma2, s_before)
    assert m.observed[1, 1]


# ------------------------------------------------- integrate_observation

def _frame(rng, pose, w=9, fov=1.2, f_dim=3, max_range=10.0):
    depth = rng.uniform(0.5, 3.0, size=(1, w))
    feats = rng.normal(size=(1, w, f_dim))
    return make_obs(depth, pose=pose, fov=fov, max_range=max_range,
                    features=feats)


def test_integrate_all_invalid_leaves_map_unchanged():
    m = create_map(6.0, 6.0, 2.0, 3, 1.0)
    obs = make_obs(np.zeros((1, 5)), pose=(3.0, 3.0, 0.0),
                   features=np.ones((1, 5, 3)))
    integrate_observation(m, obs)
    assert not m.observed.any()
    assert np.all(m.sigma2 == 1.0)
    assert np.all(m.F == 0.0)


def test_integrate_requires_features():
    m = create_map(6.0, 6.0, 2.0, 3, 1.0)
    with pytest.raises(ValueError):
        integrate_observation(m, make_obs([[1.0]], pose=(3.0, 3.0, 0.0)))


def test_integrate_repeated_observation_strictly_shrinks_variance():
    rng = RNG(2)
    m = create_map(6.0, 6.0, 2.0, 3, 1.0)
    obs = _frame(rng, pose=(3.0, 3.0, 0.5))
    integrate_observation(m, obs)
    touched = m.observed.copy()
    assert touched.any()
    for _ in range(3):
        before = m.sigma2.copy()
        integrate_observation(m, obs)
        assert np.all(m.sigma2[touched] < before[touched])


def test_integrate_equals_manual_stage_chain():
    rng = RNG(4)
    m1 = create_map(6.0, 6.0, 2.0, 3, 1.0)
    m2 = create_map(6.0, 6.0, 2.0, 3, 1.0)
    obs = _frame(rng, pose=(2.0, 3.0, -0.3))
    integrate_observation(m1, obs)

    mdl = m2.model
    var, ok = compute_pixel_variances(
        obs.depth, mdl.d_opt, eps_var=mdl.eps_var,
        exponent_form=mdl.feature_variance_exponent, valid=obs.valid)
    updates, discarded = project_and_aggregate(
        m2, obs, obs.features, var, valid=ok,
        literal_variance_weights=mdl.literal_variance_weights)
    m2.discarded_pixels += discarded
    blurred = spatial_blur(updates, mdl.p, mdl.truncation_sigmas,
                           grid_shape=(m2.n_x, m2.n_y),
                           resolution=m2.resolution,
                           min_radius_cells=mdl.min_kernel_radius)
    bayesian_fuse(m2, blurred, eps_var=mdl.eps_var)

    assert np.array_equal(m1.F, m2.F)
    assert np.array_equal(m1.sigma2, m2.sigma2)
    assert np.array_equal(m1.sigma2_E, m2.sigma2_E)
    assert np.array_equal(m1.observed, m2.observed)
    assert m1.discarded_pixels == m2.discarded_pixels


def test_integrate_identical_sequences_are_bitwise_identical():
    def run():
        rng = RNG(7)
        m = create_map(6.0, 6.0, 2.0, 3, 1.0)
        for i in range(5):
            integrate_observation(
                m, _frame(rng, pose=(3.0, 3.0, 0.4 * i)))
        return m

    a, b = run(), run()
    assert np.array_equal(a.F, b.F)
    assert np.array_equal(a.sigma2, b.sigma2)
    assert np.array_equal(a.sigma2_E, b.sigma2_E)
    assert np.array_equal(a.observed, b.observed)


# ------------------------------------------------------------ persistence

def test_state_roundtrip(tmp_path):
    rng = RNG(13)
    m = create_map(6.0, 6.0, 2.0, 3, 1.0,
                   model=UpdateModel(d_opt=1.5, p=0.05))
    integrate_observation(m, _frame(rng, pose=(3.0, 3.0, 0.0)))
    free = rng.random((m.n_x, m.n_y)) > 0.5
    path = tmp_path / "state.npz"
    save_state(m, path, known_free=free)
    loaded, extras = load_state(path)
    assert np.array_equal(loaded.F, m.F)
    assert np.array_equal(loaded.sigma2, m.sigma2)
    assert np.array_equal(loaded.sigma2_E, m.sigma2_E)
    assert np.array_equal(loaded.observed, m.observed)
    assert loaded.model == m.model
    assert loaded.prior_variance == m.prior_variance
    assert np.array_equal(extras["known_free"], free)
