"""Synthetic codebook embedder, feature upsampling, and frame file I/O.

The codebook stands in for a vision-language feature space: every label gets
a unit vector, pairwise similarities between distinct labels are bounded by
a configurable overlap, and a reserved "void" vector represents walls and
other uninformative background. Frames of per-patch features can be dumped
to and loaded from a little-endian binary format with a readable header.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from semnav.mapping import PosedObservation

VOID_LABEL = "void"

_MAGIC = b"SEMNAV-FEATURE-FRAMES 1\n"
_REC_HEAD = struct.Struct("<5d4I")  # pose x,y,heading, fov, max_range, H,W,Hf,Wf
_OVERLAP_TOL = 1e-6


class FeatureFrameError(ValueError):
    """Malformed or inconsistent feature-frame file."""

    def __init__(self, message: str, record: int | None = None):
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)
        self.record = record


@dataclass
class FeatureFrame:
    """Patch-level feature field of one camera frame."""

    features: np.ndarray  # (H_F, W_F, f) float32

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]


@dataclass
class Codebook:
    """Unit-norm label vectors with bounded pairwise similarity."""

    labels: list[str]
    vectors: np.ndarray          # (L, f) float64, unit rows
    void_vector: np.ndarray      # (f,) float64, unit
    noise_sigma: float
    distractor_overlap: float
    seed: int = 0
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    @property
    def feature_dim(self) -> int:
        return self.vectors.shape[1]

    def vector_for(self, label: str) -> np.ndarray:
        if label == VOID_LABEL:
            return self.void_vector
        try:
            return self.vectors[self._index[label]]
        except KeyError:
            raise KeyError(f"label {label!r} not in codebook") from None


def _repair_overlaps(vecs: np.ndarray, max_overlap: float, rng,
                     sweeps: int = 200) -> np.ndarray:
    """Pairwise repulsion until all |cos| <= max_overlap, if feasible."""
    n = len(vecs)
    for _ in range(sweeps):
        worst = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                c = float(vecs[i] @ vecs[j])
                worst = max(worst, abs(c))
                if abs(c) > max_overlap:
                    excess = c - np.sign(c) * max_overlap * 0.9
                    vecs[i] -= 0.5 * excess * vecs[j]
                    vecs[j] -= 0.5 * excess * vecs[i]
                    vecs[i] /= np.linalg.norm(vecs[i])
                    vecs[j] /= np.linalg.norm(vecs[j])
        if worst <= max_overlap:
            return vecs
    return vecs


def build_codebook(labels: list[str], feature_dim: int,
                   distractor_overlap: float = 0.3,
                   noise_sigma: float = 0.05, seed: int = 0) -> Codebook:
    """Construct a codebook with pairwise |cosine| <= distractor_overlap.

    Random unit vectors are drawn with rejection against already accepted
    ones; a repulsion pass repairs residual violations, falling back to a
    blend with a random orthonormal frame when n_labels + 1 <= feature_dim.
    Raises ValueError when the bound cannot be met.
    """
    if VOID_LABEL in labels:
        raise ValueError(f"{VOID_LABEL!r} is reserved")
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate labels")
    if not 0 <= distractor_overlap < 1:
        raise ValueError("distractor_overlap must be in [0, 1)")
    rng = np.random.default_rng(seed)
    n = len(labels) + 1  # the void vector obeys the same bound

    accepted: list[np.ndarray] = []
    for _ in range(n):
        for _attempt in range(200):
            v = rng.normal(size=feature_dim)
            v /= np.linalg.norm(v)
            if all(abs(v @ u) <= distractor_overlap for u in accepted):
                accepted.append(v)
                break
        else:
            accepted.append(v)  # fixed below
    vecs = _repair_overlaps(np.stack(accepted), distractor_overlap, rng)

    def worst_pair(m):
        g = np.abs(m @ m.T)
        np.fill_diagonal(g, 0.0)
        return float(g.max())

    if worst_pair(vecs) > distractor_overlap + _OVERLAP_TOL and n <= feature_dim:
        # Orthonormal frame blended toward the random draw keeps overlaps
        # below the bound while staying seed-dependent.
        q, _ = np.linalg.qr(rng.normal(size=(feature_dim, n)))
        frame = q.T[:n]
        w = distractor_overlap / 2.0
        vecs = (1 - w) * frame + w * vecs
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        vecs = _repair_overlaps(vecs, distractor_overlap, rng)

    if worst_pair(vecs) > distractor_overlap + _OVERLAP_TOL:
        raise ValueError(
            f"cannot fit {n} vectors in dim {feature_dim} with pairwise "
            f"overlap <= {distractor_overlap}")

    return Codebook(labels=list(labels), vectors=vecs[:-1],
                    void_vector=vecs[-1], noise_sigma=noise_sigma,
                    distractor_overlap=distractor_overlap, seed=seed)


def embed_text(codebook: Codebook, label: str) -> np.ndarray:
    """Exact (noise-free) unit vector for a known label."""
    if label not in codebook._index:
        raise KeyError(f"label {label!r} not in codebook")
    return codebook.vectors[codebook._index[label]].copy()


def synth_embed_frame(codebook: Codebook, label_image: np.ndarray,
                      seed) -> FeatureFrame:
    """Noisy per-patch embedding of a label image.

    Each patch gets unit-normalize(codebook vector + N(0, noise_sigma^2))
    drawn deterministically from the seed; "void" patches get the fixed
    background vector with no noise. Unknown labels raise KeyError.
    """
    labels = np.asarray(label_image)
    if labels.ndim != 2:
        raise ValueError("label_image must be H_F x W_F")
    h, w = labels.shape
    f_dim = codebook.feature_dim
    base = np.empty((h, w, f_dim))
    is_void = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            lab = str(labels[i, j])
            base[i, j] = codebook.vector_for(lab)
            is_void[i, j] = lab == VOID_LABEL
    rng = np.random.default_rng(seed)
    noisy = base + rng.normal(scale=codebook.noise_sigma, size=base.shape) \
        if codebook.noise_sigma > 0 else base.copy()
    norms = np.linalg.norm(noisy, axis=2, keepdims=True)
    noisy /= np.maximum(norms, 1e-12)
    noisy[is_void] = codebook.void_vector
    return FeatureFrame(features=noisy.astype(np.float32))


def upsample_bilinear(frame: FeatureFrame, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling of a patch grid to pixel resolution.

    Patch centers are aligned with their pixel footprints (pixel i samples
    source coordinate (i + 0.5) * H_F / H - 0.5, clamped at the borders), so
    an equal-size call is the identity and values never overshoot the patch
    min/max per channel.
    """
    h_f, w_f = frame.height, frame.width
    if height < h_f or width < w_f:
        raise ValueError("target size must be >= source size")
    src = frame.features.astype(np.float64)

    def axis_coords(n_out, n_in):
        u = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        u = np.clip(u, 0.0, n_in - 1.0)
        lo = np.floor(u).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (u - lo)

    ylo, yhi, wy = axis_coords(height, h_f)
    xlo, xhi, wx = axis_coords(width, w_f)
    top = (src[ylo][:, xlo] * (1 - wx)[None, :, None]
           + src[ylo][:, xhi] * wx[None, :, None])
    bot = (src[yhi][:, xlo] * (1 - wx)[None, :, None]
           + src[yhi][:, xhi] * wx[None, :, None])
    out = top * (1 - wy)[:, None, None] + bot * wy[:, None, None]
    return out


# ------------------------------------------------------------------ file IO

def save_feature_frames(path, frames: list[tuple[PosedObservation, FeatureFrame]]
                        ) -> None:
    """Write (observation, patch features) records to the binary format.

    Layout: ASCII magic line, then per record a little-endian u64 payload
    length followed by pose/fov/range scalars, the four grid dims, the
    feature dim, and raw float32 depth, u8 valid, float32 features.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for obs, frame in frames:
            h, w = obs.depth.shape
            feats = np.ascontiguousarray(frame.features, dtype="<f4")
            depth = np.ascontiguousarray(obs.depth, dtype="<f4")
            valid = np.ascontiguousarray(obs.valid, dtype=np.uint8)
            head = _REC_HEAD.pack(obs.pose[0], obs.pose[1], obs.pose[2],
                                  obs.fov, obs.max_range,
                                  h, w, frame.height, frame.width)
            payload = b"".join([
                head,
                struct.pack("<I", frame.feature_dim),
                depth.tobytes(), valid.tobytes(), feats.tobytes(),
            ])
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_feature_frames(path) -> list[tuple[PosedObservation, FeatureFrame]]:
    """Read records written by save_feature_frames.

    Raises FeatureFrameError naming the record index on truncated or
    malformed records, and when the feature dimension changes mid-file.
    """
    frames: list[tuple[PosedObservation, FeatureFrame]] = []
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise FeatureFrameError("bad magic header")
        f_dim: int | None = None
        index = 0
        while True:
            lenbuf = fh.read(8)
            if not lenbuf:
                break
            if len(lenbuf) != 8:
                raise FeatureFrameError("truncated length prefix", index)
            (length,) = struct.unpack("<Q", lenbuf)
            payload = fh.read(length)
            if len(payload) != length:
                raise FeatureFrameError("truncated payload", index)
            try:
                x, y, heading, fov, max_range, h, w, h_f, w_f = \
                    _REC_HEAD.unpack_from(payload, 0)
                off = _REC_HEAD.size
                (rec_f,) = struct.unpack_from("<I", payload, off)
                off += 4
                depth = np.frombuffer(payload, "<f4", h * w, off)
                off += depth.nbytes
                valid = np.frombuffer(payload, np.uint8, h * w, off)
                off += valid.nbytes
                feats = np.frombuffer(payload, "<f4", h_f * w_f * rec_f, off)
                off += feats.nbytes
            except (struct.error, ValueError) as exc:
                raise FeatureFrameError(str(exc), index) from exc
            if off != length:
                raise FeatureFrameError("payload size mismatch", index)
            if f_dim is None:
                f_dim = rec_f
            elif rec_f != f_dim:
                raise FeatureFrameError(
                    f"feature dim {rec_f} != {f_dim} earlier in file", index)
            obs = PosedObservation(
                pose=(x, y, heading),
                depth=depth.reshape(h, w).astype(np.float64),
                valid=valid.reshape(h, w).astype(bool),
                fov=fov, max_range=max_range,
            )
            frame = FeatureFrame(
                features=feats.reshape(h_f, w_f, rec_f).copy())
            frames.append((obs, frame))
            index += 1
    return frames


def save_codebook(path, codebook: Codebook) -> None:
    """Human-readable JSON serialization of a codebook."""
    doc = {
        "labels": codebook.labels,
        "vectors": codebook.vectors.tolist(),
        "void_vector": codebook.void_vector.tolist(),
        "noise_sigma": codebook.noise_sigma,
        "distractor_overlap": codebook.distractor_overlap,
        "seed": codebook.seed,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_codebook(path) -> Codebook:
    with open(path) as fh:
        doc = json.load(fh)
    return Codebook(
        labels=list(doc["labels"]),
        vectors=np.asarray(doc["vectors"], dtype=np.float64),
        void_vector=np.asarray(doc["void_vector"], dtype=np.float64),
        noise_sigma=float(doc["noise_sigma"]),
        distractor_overlap=float(doc["distractor_overlap"]),
        seed=int(doc["seed"]),
    )
