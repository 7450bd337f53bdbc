"""Procedural landmark dataset with a known low-rank shape distribution.

Each sample is an asymmetric polygon deformed along a small set of
orthonormal modes, posed with a random similarity transform, and rendered as
soft blobs joined by a faint polyline so the landmarks are visually
localizable.  Because the generating subspace is known, the generator doubles
as the oracle for the PCA pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import LandmarkSet

DEFAULT_SPACING_MM = 100.0
_MARGIN = 0.05
_MAX_POSE_TRIES = 200


def _default_base_shape(n_landmarks: int = 12) -> np.ndarray:
    """Hand-tuned asymmetric polygon, centered, unit 2n-vector norm.

    The asymmetry (irregular radii and angle jitter) prevents reflection
    ambiguity in Procrustes alignment.
    """
    rng = np.random.default_rng(1234)
    angles = np.linspace(0.0, 2.0 * np.pi, n_landmarks, endpoint=False)
    angles += rng.uniform(-0.18, 0.18, n_landmarks)
    radii = rng.uniform(0.72, 1.25, n_landmarks)
    pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    pts -= pts.mean(axis=0)
    flat = pts.reshape(-1)
    return flat / np.linalg.norm(flat)


def _default_modes(base: np.ndarray, n_modes: int = 3) -> np.ndarray:
    """Orthonormal deformation directions, orthogonal to the similarity
    tangent space at the base shape (translations, rotation, scale)."""
    m = base.size
    n = m // 2
    tx = np.tile([1.0, 0.0], n) / np.sqrt(n)
    ty = np.tile([0.0, 1.0], n) / np.sqrt(n)
    rot = base.reshape(-1, 2)[:, ::-1] * np.array([-1.0, 1.0])
    rot = rot.reshape(-1)
    rot /= np.linalg.norm(rot)
    gauge = np.stack([base, rot, tx, ty], axis=1)

    rng = np.random.default_rng(5678)
    raw = rng.standard_normal((m, n_modes))
    raw -= gauge @ (gauge.T @ raw)
    q, _ = np.linalg.qr(raw)
    return q


@dataclass(frozen=True)
class GeneratorSpec:
    n_landmarks: int = 12
    base_shape: np.ndarray = None
    mode_directions: np.ndarray = None      # (2n, K), orthonormal columns
    mode_stds: np.ndarray = None            # (K,), positive, decreasing
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_rotation_rad: float = 0.15
    max_translation: float = 0.05
    blob_sigma: float = 0.035
    blob_contrast: float = 0.9
    line_sigma: float = 0.018
    line_contrast: float = 0.25
    image_size: int = 64
    spacing_mm: float = DEFAULT_SPACING_MM
    seed: int = 0

    def __post_init__(self):
        base = self.base_shape
        if base is None:
            base = _default_base_shape(self.n_landmarks)
        base = np.asarray(base, dtype=np.float64)
        if base.size != 2 * self.n_landmarks:
            raise ValueError("base shape length must be 2 * n_landmarks")
        modes = self.mode_directions
        if modes is None:
            modes = _default_modes(base)
        modes = np.asarray(modes, dtype=np.float64)
        stds = self.mode_stds
        if stds is None:
            stds = np.array([0.04, 0.02, 0.01])[: modes.shape[1]]
        stds = np.asarray(stds, dtype=np.float64)
        if modes.shape != (base.size, stds.size):
            raise ValueError("mode directions / stds shapes disagree")
        gram = modes.T @ modes
        if not np.allclose(gram, np.eye(stds.size), atol=1e-8):
            raise ValueError("mode directions must be mutually orthonormal")
        if np.any(stds < 0) or np.any(np.diff(stds) > 0):
            raise ValueError("mode stds must be non-negative and non-increasing")
        object.__setattr__(self, "base_shape", base)
        object.__setattr__(self, "mode_directions", modes)
        object.__setattr__(self, "mode_stds", stds)

    @property
    def n_modes(self) -> int:
        return self.mode_stds.size


def _render(spec: GeneratorSpec, pts: np.ndarray) -> np.ndarray:
    size = spec.image_size
    axis = (np.arange(size) + 0.5) / size
    gx, gy = np.meshgrid(axis, axis)  # gx varies along columns
    image = np.zeros((size, size))

    # faint closed polyline between consecutive landmarks
    for a, b in zip(pts, np.roll(pts, -1, axis=0)):
        seg = b - a
        seg_len2 = float(seg @ seg)
        if seg_len2 < 1e-18:
            continue
        t = ((gx - a[0]) * seg[0] + (gy - a[1]) * seg[1]) / seg_len2
        t = np.clip(t, 0.0, 1.0)
        dx = gx - (a[0] + t * seg[0])
        dy = gy - (a[1] + t * seg[1])
        d2 = dx * dx + dy * dy
        image += spec.line_contrast * np.exp(-d2 / (2.0 * spec.line_sigma ** 2))

    for p in pts:
        d2 = (gx - p[0]) ** 2 + (gy - p[1]) ** 2
        image += spec.blob_contrast * np.exp(-d2 / (2.0 * spec.blob_sigma ** 2))

    return np.clip(image, 0.0, 1.0)


def _draw_sample(spec: GeneratorSpec, rng: np.random.Generator) -> np.ndarray:
    """Landmark coordinates of one sample, guaranteed inside the render
    margin by rejection."""
    for _ in range(_MAX_POSE_TRIES):
        coeffs = rng.standard_normal(spec.n_modes) * spec.mode_stds
        shape = spec.base_shape + spec.mode_directions @ coeffs
        pts = shape.reshape(-1, 2)
        scale = rng.uniform(*spec.scale_range)
        theta = rng.uniform(-spec.max_rotation_rad, spec.max_rotation_rad)
        trans = rng.uniform(-spec.max_translation, spec.max_translation, 2)
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        posed = pts @ rot.T * scale + 0.5 + trans
        if np.all(posed >= _MARGIN) and np.all(posed <= 1.0 - _MARGIN):
            return posed
    raise RuntimeError("could not draw an in-bounds sample; pose ranges too wide")


def generate(spec: GeneratorSpec, count: int
             ) -> list[tuple[np.ndarray, LandmarkSet]]:
    """`count` samples of (image, LandmarkSet), deterministic given the seed.

    Each sample uses its own seed derived from (spec.seed, index), so subsets
    are reproducible independently of batch size.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    samples = []
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=spec.seed, spawn_key=(idx,)))
        pts = _draw_sample(spec, rng)
        image = _render(spec, pts)
        samples.append((image, LandmarkSet(pts, spacing_mm=spec.spacing_mm)))
    return samples


def spec_to_dict(spec: GeneratorSpec) -> dict:
    return {
        "n_landmarks": spec.n_landmarks,
        "base_shape": spec.base_shape.tolist(),
        "mode_directions": spec.mode_directions.tolist(),
        "mode_stds": spec.mode_stds.tolist(),
        "scale_range": list(spec.scale_range),
        "max_rotation_rad": spec.max_rotation_rad,
        "max_translation": spec.max_translation,
        "blob_sigma": spec.blob_sigma,
        "blob_contrast": spec.blob_contrast,
        "line_sigma": spec.line_sigma,
        "line_contrast": spec.line_contrast,
        "image_size": spec.image_size,
        "spacing_mm": spec.spacing_mm,
        "seed": spec.seed,
    }


def spec_from_dict(doc: dict) -> GeneratorSpec:
    return GeneratorSpec(
        n_landmarks=int(doc["n_landmarks"]),
        base_shape=np.asarray(doc["base_shape"], dtype=np.float64),
        mode_directions=np.asarray(doc["mode_directions"], dtype=np.float64),
        mode_stds=np.asarray(doc["mode_stds"], dtype=np.float64),
        scale_range=tuple(doc["scale_range"]),
        max_rotation_rad=float(doc["max_rotation_rad"]),
        max_translation=float(doc["max_translation"]),
        blob_sigma=float(doc["blob_sigma"]),
        blob_contrast=float(doc["blob_contrast"]),
        line_sigma=float(doc["line_sigma"]),
        line_contrast=float(doc["line_contrast"]),
        image_size=int(doc["image_size"]),
        spacing_mm=float(doc["spacing_mm"]),
        seed=int(doc["seed"]),
    )


def corrupt_predictions(truth: LandmarkSet, noise_std: float,
                        outlier_prob: float, outlier_mm: float,
                        rng: np.random.Generator) -> LandmarkSet:
    """Emulate imperfect predictions: Gaussian jitter plus, per landmark with
    probability `outlier_prob`, a displacement of at least `outlier_mm`."""
    if noise_std < 0 or outlier_prob < 0 or outlier_mm < 0:
        raise ValueError("corruption parameters must be non-negative")
    coords = truth.coords.copy()
    if noise_std > 0:
        coords += rng.normal(0.0, noise_std, coords.shape)
    if outlier_prob > 0:
        hit = rng.random(truth.n_landmarks) < outlier_prob
        for i in np.nonzero(hit)[0]:
            angle = rng.uniform(0.0, 2.0 * np.pi)
            magnitude = (outlier_mm / truth.spacing_mm) * rng.uniform(1.0, 1.5)
            coords[i] += magnitude * np.array([np.cos(angle), np.sin(angle)])
    return truth.with_coords(coords)
