"""Open-vocabulary belief map with per-cell feature vectors and variances.

The map keeps three persistent layers on a regular 2D grid: a fused feature
vector per cell, a fusion variance that shrinks as observations accumulate,
and a search variance that follows the same update rule but can be reset
between queries. Sensor frames enter through a four stage pipeline:

1. per-pixel observation variances from depth (edge leakage, distance model)
2. projection of pixels into map cells with precision-weighted aggregation
3. distance-dependent sparse Gaussian scattering of the cell updates
4. per-cell recursive Bayesian fusion with a Kalman gain

Scalars are stored as float32; stage arithmetic runs in float64 and is cast
on fusion. All operations are deterministic for identical inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SCALAR_BYTES = 4  # float32 storage for features and variances

VARIANCE_FORMS = ("half-error-squared", "error-squared-half")

_VAR_CAP = 1e12  # keeps exp() blowups finite for far-out-of-range depths


@dataclass
class UpdateModel:
    """Tunable parameters of the probabilistic observation model."""

    d_opt: float = 2.5                 # optimal detection distance [m]
    p: float = 0.02                    # location variance per squared meter
    eps_var: float = 1e-3              # variance floor, keeps gains < 1
    truncation_sigmas: float = 3.0     # scatter kernel cutoff, in sigma
    min_kernel_radius: int = 1         # scatter kernel floor [cells]
    feature_variance_exponent: str = "half-error-squared"
    literal_variance_weights: bool = False

    def __post_init__(self):
        if self.feature_variance_exponent not in VARIANCE_FORMS:
            raise ValueError(
                f"feature_variance_exponent must be one of {VARIANCE_FORMS}, "
                f"got {self.feature_variance_exponent!r}"
            )


@dataclass
class PosedObservation:
    """One sensor frame: per-ray depths with camera pose and field of view.

    Depth rows share the planar camera geometry (worlds are 2D); ray j points
    at azimuth -fov/2 + (j + 0.5) * fov / W relative to the heading.
    `features` is attached after semantic embedding and upsampling.
    """

    pose: tuple[float, float, float]       # x [m], y [m], heading [rad]
    depth: np.ndarray                      # (H, W) ray distances [m]
    valid: np.ndarray                      # (H, W) False for censored rays
    fov: float                             # horizontal field of view [rad]
    max_range: float                       # sensor range [m]
    hit_labels: np.ndarray | None = None   # (H, W) unicode labels
    features: np.ndarray | None = None     # (H, W, f) per-pixel features

    @property
    def ray_angles(self) -> np.ndarray:
        """Azimuth of each column relative to the heading, in radians."""
        w = self.depth.shape[1]
        return -self.fov / 2.0 + (np.arange(w) + 0.5) * (self.fov / w)


@dataclass
class CellUpdate:
    """Aggregated observation for one map cell."""

    cell: tuple[int, int]
    feature: np.ndarray        # (f,) precision-weighted pixel feature
    variance: float            # mean pixel variance, > 0
    camera_distance: float     # planar camera-to-cell-center distance [m]


@dataclass
class SparseField:
    """Sparse raster: values only at the listed cells."""

    cells: np.ndarray       # (K, 2) int cell indices
    features: np.ndarray    # (K, f)
    variances: np.ndarray   # (K,)

    def __len__(self) -> int:
        return len(self.cells)


@dataclass
class BeliefMap:
    """Grid of fused semantic features with fusion and search variances."""

    extent_x: float           # [m]
    extent_y: float           # [m]
    resolution: float         # cells per meter
    feature_dim: int
    prior_variance: float
    model: UpdateModel
    F: np.ndarray             # (n_x, n_y, f) float32 fused features
    sigma2: np.ndarray        # (n_x, n_y) float32 fusion variance
    sigma2_E: np.ndarray      # (n_x, n_y) float32 search variance
    observed: np.ndarray      # (n_x, n_y) bool
    discarded_pixels: int = 0  # projections that fell outside the map

    @property
    def n_x(self) -> int:
        return self.F.shape[0]

    @property
    def n_y(self) -> int:
        return self.F.shape[1]

    @property
    def cell_size(self) -> float:
        return 1.0 / self.resolution

    def cell_center(self, cell: tuple[int, int]) -> tuple[float, float]:
        cs = self.cell_size
        return ((cell[0] + 0.5) * cs, (cell[1] + 0.5) * cs)

    def memory_estimate(self) -> int:
        """Estimated resident bytes of the persistent grids."""
        return memory_estimate_bytes(self.n_x, self.n_y, self.feature_dim)

    def copy(self) -> "BeliefMap":
        """Deep copy, e.g. a query snapshot taken between updates."""
        return replace(
            self,
            F=self.F.copy(),
            sigma2=self.sigma2.copy(),
            sigma2_E=self.sigma2_E.copy(),
            observed=self.observed.copy(),
        )


def memory_estimate_bytes(n_x: int, n_y: int, feature_dim: int,
                          scalar_bytes: int = SCALAR_BYTES) -> int:
    """Bytes for the feature grid, both variance grids, and the observed mask."""
    cells = n_x * n_y
    return cells * (feature_dim + 2) * scalar_bytes + cells


def create_map(extent_x: float, extent_y: float, resolution: float,
               feature_dim: int, prior_variance: float,
               model: UpdateModel | None = None) -> BeliefMap:
    """Allocate an empty belief map covering [0, extent_x] x [0, extent_y].

    All cells start unobserved with zero features and both variance layers at
    the prior. Raises ValueError for non-positive arguments.
    """
    if extent_x <= 0 or extent_y <= 0:
        raise ValueError("map extents must be positive")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if feature_dim <= 0:
        raise ValueError("feature_dim must be positive")
    if prior_variance <= 0:
        raise ValueError("prior_variance must be positive")
    n_x = int(round(extent_x * resolution))
    n_y = int(round(extent_y * resolution))
    if n_x < 1 or n_y < 1:
        raise ValueError("map extent smaller than one cell")
    return BeliefMap(
        extent_x=extent_x,
        extent_y=extent_y,
        resolution=resolution,
        feature_dim=feature_dim,
        prior_variance=prior_variance,
        model=model if model is not None else UpdateModel(),
        F=np.zeros((n_x, n_y, feature_dim), dtype=np.float32),
        sigma2=np.full((n_x, n_y), prior_variance, dtype=np.float32),
        sigma2_E=np.full((n_x, n_y), prior_variance, dtype=np.float32),
        observed=np.zeros((n_x, n_y), dtype=bool),
    )


def compute_pixel_variances(depth: np.ndarray, d_opt: float, *,
                            eps_var: float = 1e-3,
                            exponent_form: str = "half-error-squared",
                            valid: np.ndarray | None = None,
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel observation variance from a depth image.

    The leakage term tanh(dDx^2 + dDy^2) penalizes depth discontinuities
    (central differences, one-sided at borders, zero along size-1 axes); the
    distance term grows away from the optimal detection distance. The product
    is floored at eps_var. Returns (variances, valid_mask) where invalid
    pixels (non-finite or non-positive depth, or excluded by `valid`) take no
    part in updates.
    """
    if exponent_form not in VARIANCE_FORMS:
        raise ValueError(f"unknown exponent form {exponent_form!r}")
    depth = np.asarray(depth, dtype=np.float64)
    ok = np.isfinite(depth) & (depth > 0)
    if valid is not None:
        ok = ok & np.asarray(valid, dtype=bool)
    work = np.where(np.isfinite(depth), depth, 0.0)

    gx = np.gradient(work, axis=1) if work.shape[1] > 1 else np.zeros_like(work)
    gy = np.gradient(work, axis=0) if work.shape[0] > 1 else np.zeros_like(work)
    sigma2_l = np.tanh(gx * gx + gy * gy)

    err = d_opt - work
    if exponent_form == "half-error-squared":
        expo = (err / 2.0) ** 2
    else:
        expo = (err * err) / 2.0
    sigma2_f = np.exp(np.minimum(expo, np.log(_VAR_CAP)))

    var = np.maximum(sigma2_l * sigma2_f, eps_var)
    return var, ok


def project_and_aggregate(map_: BeliefMap, obs: PosedObservation,
                          pixel_features: np.ndarray,
                          pixel_variances: np.ndarray,
                          valid: np.ndarray | None = None,
                          literal_variance_weights: bool = False,
                          ) -> tuple[list[CellUpdate], int]:
    """Project pixels into map cells and aggregate per cell.

    Each valid pixel is unprojected along its ray, transformed by the camera
    pose, dropped to the plane, and binned. Per cell the feature is the
    normalized inverse-variance-weighted sum of pixel features (or plain
    variance weights under `literal_variance_weights`), the variance is the
    arithmetic mean of pixel variances, and the camera distance is the planar
    distance to the cell center. Returns (updates sorted by row-major cell,
    number of valid pixels discarded for projecting out of bounds).
    """
    depth = np.asarray(obs.depth, dtype=np.float64)
    h, w = depth.shape
    feats = np.asarray(pixel_features, dtype=np.float64)
    if feats.shape[:2] != (h, w):
        raise ValueError("pixel_features shape does not match depth")
    variances = np.asarray(pixel_variances, dtype=np.float64)
    ok = np.isfinite(depth) & (depth > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)

    angles = obs.ray_angles
    x0, y0, heading = obs.pose
    ca, sa = np.cos(angles), np.sin(angles)            # (W,) camera frame
    px = depth * ca[None, :]
    py = depth * sa[None, :]
    ch, sh = math.cos(heading), math.sin(heading)
    wx = x0 + ch * px - sh * py
    wy = y0 + sh * px + ch * py

    res = map_.resolution
    wx = np.where(ok, wx, -1.0)  # keeps NaN out of the int cast
    wy = np.where(ok, wy, -1.0)
    cx = np.floor(wx * res).astype(np.int64)
    cy = np.floor(wy * res).astype(np.int64)
    in_bounds = (cx >= 0) & (cx < map_.n_x) & (cy >= 0) & (cy < map_.n_y)
    discarded = int(np.count_nonzero(ok & ~in_bounds))
    keep = ok & in_bounds
    if not keep.any():
        return [], discarded

    flat = (cx[keep] * map_.n_y + cy[keep])
    var_k = variances[keep]
    feat_k = feats[keep].reshape(-1, feats.shape[-1])
    weights = var_k if literal_variance_weights else 1.0 / var_k

    uniq, inv = np.unique(flat, return_inverse=True)
    n_cells = len(uniq)
    wsum = np.bincount(inv, weights=weights, minlength=n_cells)
    wfeat = np.zeros((n_cells, feat_k.shape[1]))
    np.add.at(wfeat, inv, weights[:, None] * feat_k)
    var_mean = np.bincount(inv, weights=var_k, minlength=n_cells)
    var_mean /= np.bincount(inv, minlength=n_cells)

    ux = uniq // map_.n_y
    uy = uniq % map_.n_y
    cs = map_.cell_size
    dist = np.hypot((ux + 0.5) * cs - x0, (uy + 0.5) * cs - y0)

    updates = []
    for i in range(n_cells):
        updates.append(CellUpdate(
            cell=(int(ux[i]), int(uy[i])),
            feature=wfeat[i] / wsum[i],
            variance=float(var_mean[i]),
            camera_distance=float(dist[i]),
        ))
    return updates, discarded


def spatial_blur(updates: list[CellUpdate], p: float, truncation: float, *,
                 grid_shape: tuple[int, int], resolution: float,
                 min_radius_cells: int = 1) -> SparseField:
    """Scatter cell updates with distance-dependent Gaussian kernels.

    Each update spreads with sigma_d = sqrt(p) * camera_distance (converted
    to cells), truncated at `truncation` sigma on a square footprint of at
    least `min_radius_cells`, renormalized, and clipped at the grid border.
    Overlapping scatters sum features and take the weight-proportional mean
    of variances. p = 0 degenerates to a delta kernel.
    """
    if p < 0:
        raise ValueError("p must be non-negative")
    if not updates:
        return SparseField(np.zeros((0, 2), dtype=np.int64),
                           np.zeros((0, 0)), np.zeros(0))

    n_x, n_y = grid_shape
    f_dim = len(updates[0].feature)
    sigmas = np.array([math.sqrt(p) * u.camera_distance * resolution
                       for u in updates])
    radii = np.where(
        sigmas > 0,
        np.maximum(min_radius_cells, np.ceil(truncation * sigmas)),
        0,
    ).astype(np.int64)

    xs = np.array([u.cell[0] for u in updates])
    ys = np.array([u.cell[1] for u in updates])
    lo_x = max(int((xs - radii).min()), 0)
    lo_y = max(int((ys - radii).min()), 0)
    hi_x = min(int((xs + radii).max()) + 1, n_x)
    hi_y = min(int((ys + radii).max()) + 1, n_y)
    bw, bh = hi_x - lo_x, hi_y - lo_y

    feat_acc = np.zeros((bw, bh, f_dim))
    var_acc = np.zeros((bw, bh))
    mass = np.zeros((bw, bh))

    for u, sigma, r in zip(updates, sigmas, radii):
        x, y = u.cell
        r = int(r)
        if sigma <= 0 or r == 0:
            kernel = np.ones((1, 1))
            r = 0
        else:
            offs = np.arange(-r, r + 1)
            g = np.exp(-(offs * offs) / (2.0 * sigma * sigma))
            kernel = np.outer(g, g)
            kernel /= kernel.sum()
        kx0, ky0 = x - r, y - r
        sx0, sy0 = max(kx0, 0), max(ky0, 0)
        sx1, sy1 = min(x + r + 1, n_x), min(y + r + 1, n_y)
        if sx0 >= sx1 or sy0 >= sy1:
            continue
        sub = kernel[sx0 - kx0:sx1 - kx0, sy0 - ky0:sy1 - ky0]
        bx, by = sx0 - lo_x, sy0 - lo_y
        view = (slice(bx, bx + sub.shape[0]), slice(by, by + sub.shape[1]))
        mass[view] += sub
        feat_acc[view] += sub[:, :, None] * u.feature
        var_acc[view] += sub * u.variance

    hit = mass > 0
    bx, by = np.nonzero(hit)
    cells = np.stack([bx + lo_x, by + lo_y], axis=1)
    return SparseField(
        cells=cells,
        features=feat_acc[hit],
        variances=var_acc[hit] / mass[hit],
    )


def bayesian_fuse(map_: BeliefMap, blurred: SparseField,
                  eps_var: float | None = None) -> BeliefMap:
    """Fuse a blurred observation field into the map, in place.

    Per cell: K = s_t / (s_obs + s_t), F <- F + K (F_obs - F),
    s_t <- (1 - K) s_t; the search variance follows the same rule with its
    own gain. Observation variances <= 0 are floored at eps_var. Touched
    cells are marked observed.
    """
    if eps_var is None:
        eps_var = map_.model.eps_var
    if len(blurred) == 0:
        return map_
    xs = blurred.cells[:, 0]
    ys = blurred.cells[:, 1]
    s_obs = np.maximum(blurred.variances, eps_var).astype(np.float32)
    f_obs = blurred.features.astype(np.float32)

    s_t = map_.sigma2[xs, ys]
    k = s_t / (s_obs + s_t)
    map_.F[xs, ys] += k[:, None] * (f_obs - map_.F[xs, ys])
    map_.sigma2[xs, ys] = (1.0 - k) * s_t

    s_e = map_.sigma2_E[xs, ys]
    k_e = s_e / (s_obs + s_e)
    map_.sigma2_E[xs, ys] = (1.0 - k_e) * s_e

    map_.observed[xs, ys] = True
    return map_


def query_similarity(map_: BeliefMap, query: np.ndarray) -> np.ndarray:
    """Cosine similarity between the query vector and every cell feature.

    Returns an (n_x, n_y) float32 raster in [-1, 1]; cells where either
    vector has zero norm (in particular all unobserved cells) score 0.
    """
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != map_.feature_dim:
        raise ValueError(
            f"query dimension {q.shape[0]} != feature_dim {map_.feature_dim}"
        )
    qn = float(np.linalg.norm(q))
    num = np.tensordot(map_.F, q, axes=([2], [0]))
    fn = np.sqrt(np.sum(map_.F.astype(np.float64) ** 2, axis=2))
    denom = fn * qn
    with np.errstate(divide="ignore", invalid="ignore"):
        sim = np.where(denom > 0, num / denom, 0.0)
    return np.clip(sim, -1.0, 1.0).astype(np.float32)


def reset_search_layer(map_: BeliefMap) -> BeliefMap:
    """Reset the search variance to the prior everywhere; F, sigma2 untouched."""
    map_.sigma2_E[:] = map_.prior_variance
    return map_


def integrate_observation(map_: BeliefMap, obs: PosedObservation) -> BeliefMap:
    """Run the full update pipeline for one posed observation, in place.

    Equivalent to compute_pixel_variances, project_and_aggregate,
    spatial_blur, bayesian_fuse applied in order with the map's model
    parameters. Frames with no valid pixel leave the map unchanged.
    """
    if obs.features is None:
        raise ValueError("observation has no features attached")
    m = map_.model
    var, ok = compute_pixel_variances(
        obs.depth, m.d_opt, eps_var=m.eps_var,
        exponent_form=m.feature_variance_exponent, valid=obs.valid,
    )
    updates, discarded = project_and_aggregate(
        map_, obs, obs.features, var, valid=ok,
        literal_variance_weights=m.literal_variance_weights,
    )
    map_.discarded_pixels += discarded
    if not updates:
        return map_
    blurred = spatial_blur(
        updates, m.p, m.truncation_sigmas,
        grid_shape=(map_.n_x, map_.n_y), resolution=map_.resolution,
        min_radius_cells=m.min_kernel_radius,
    )
    return bayesian_fuse(map_, blurred, eps_var=m.eps_var)


def save_state(map_: BeliefMap, path, **extra_layers: np.ndarray) -> None:
    """Persist the map grids plus optional named boolean layers to .npz."""
    m = map_.model
    arrays = dict(
        F=map_.F, sigma2=map_.sigma2, sigma2_E=map_.sigma2_E,
        observed=map_.observed,
        meta=np.array([map_.extent_x, map_.extent_y, map_.resolution,
                       map_.prior_variance]),
        model=np.array([m.d_opt, m.p, m.eps_var, m.truncation_sigmas,
                        m.min_kernel_radius]),
        model_flags=np.array([
            VARIANCE_FORMS.index(m.feature_variance_exponent),
            int(m.literal_variance_weights),
        ]),
    )
    for name, layer in extra_layers.items():
        arrays[f"layer_{name}"] = layer
    np.savez_compressed(path, **arrays)


def load_state(path) -> tuple[BeliefMap, dict[str, np.ndarray]]:
    """Inverse of save_state; returns (map, extra layers by name)."""
    with np.load(path) as data:
        extent_x, extent_y, resolution, prior = data["meta"]
        d_opt, p, eps_var, trunc, min_r = data["model"]
        form_idx, literal = data["model_flags"]
        model = UpdateModel(
            d_opt=float(d_opt), p=float(p), eps_var=float(eps_var),
            truncation_sigmas=float(trunc), min_kernel_radius=int(min_r),
            feature_variance_exponent=VARIANCE_FORMS[int(form_idx)],
            literal_variance_weights=bool(literal),
        )
        map_ = BeliefMap(
            extent_x=float(extent_x), extent_y=float(extent_y),
            resolution=float(resolution),
            feature_dim=int(data["F"].shape[2]),
            prior_variance=float(prior), model=model,
            F=data["F"], sigma2=data["sigma2"], sigma2_E=data["sigma2_E"],
            observed=data["observed"],
        )
        extras = {key[len("layer_"):]: data[key]
                  for key in data.files if key.startswith("layer_")}
    return map_, extras
