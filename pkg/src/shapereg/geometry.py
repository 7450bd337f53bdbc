"""Landmark and shape representations, similarity transforms, Procrustes alignment.

Shapes are stored either as an (n, 2) coordinate array inside a
:class:`LandmarkSet` or as a flat "shape vector" of length 2n with the
interleaved layout (x1, y1, x2, y2, ..., xn, yn).  All alignment here is
rigid-plus-scale: uniform scale, rotation, translation (no shear, no
reflection).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateShape, NoConvergenceWarning

GPA_TOL = 1e-7
GPA_MAX_ITER = 100
_COLLINEAR_RTOL = 1e-12


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered landmark coordinates for one sample.

    coords: (n, 2) float array, normalized image coordinates.
    valid: (n,) bool array; landmarks excluded from downstream use are False.
    spacing_mm: physical millimetres per unit coordinate, for metric errors.
    """

    coords: np.ndarray
    valid: np.ndarray = None
    spacing_mm: float = 100.0

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must be (n, 2), got {coords.shape}")
        if coords.shape[0] < 3:
            raise ValueError("a landmark set needs at least 3 points")
        if not np.all(np.isfinite(coords)):
            raise ValueError("landmark coordinates must be finite")
        valid = self.valid
        if valid is None:
            valid = np.ones(coords.shape[0], dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (coords.shape[0],):
            raise ValueError("valid mask must have one flag per landmark")
        if not self.spacing_mm > 0:
            raise ValueError("spacing_mm must be positive")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "spacing_mm", float(self.spacing_mm))

    @property
    def n_landmarks(self) -> int:
        return self.coords.shape[0]

    def with_coords(self, coords: np.ndarray) -> "LandmarkSet":
        return replace(self, coords=coords)


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> scale * R(rotation) @ p + translation."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (2,):
            raise ValueError("translation must be a pair")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", float(self.rotation))
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c, s = np.cos(-self.rotation), np.sin(-self.rotation)
        R_inv = np.array([[c, -s], [s, c]])
        return SimilarityTransform(
            scale=inv_scale,
            rotation=-self.rotation,
            translation=-inv_scale * (R_inv @ self.translation),
        )

    def with_scale(self, scale: float) -> "SimilarityTransform":
        return replace(self, scale=float(scale))


def flatten(lset: LandmarkSet) -> np.ndarray:
    """LandmarkSet -> shape vector (x1, y1, ..., xn, yn)."""
    return lset.coords.reshape(-1).copy()


def unflatten(vec: np.ndarray, spacing_mm: float = 100.0,
              valid: np.ndarray | None = None) -> LandmarkSet:
    """Shape vector -> LandmarkSet (all landmarks valid unless given)."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size % 2 != 0:
        raise ValueError("shape vector must be flat with even length")
    return LandmarkSet(vec.reshape(-1, 2), valid=valid, spacing_mm=spacing_mm)


def as_points(vec: np.ndarray) -> np.ndarray:
    """View a shape vector as an (n, 2) point array."""
    vec = np.asarray(vec, dtype=np.float64)
    return vec.reshape(-1, 2)


def apply_transform(t: SimilarityTransform, vec: np.ndarray) -> np.ndarray:
    """Apply a similarity transform to every point of a shape vector."""
    pts = as_points(vec)
    out = pts @ t.matrix().T + t.translation
    return out.reshape(-1)


def procrustes_align(source: np.ndarray, target: np.ndarray,
                     mask: np.ndarray | None = None) -> SimilarityTransform:
    """Least-squares similarity transform taking source onto target.

    Minimizes the sum of squared distances from transformed source points to
    target points over the masked landmarks.  The rotation is always proper
    (determinant +1); reflected solutions are never considered.

    Raises DegenerateShape when the masked source points are coincident or
    collinear to within 1e-12 relative spread.
    """
    ps = as_points(source)
    pt = as_points(target)
    if ps.shape != pt.shape:
        raise ValueError("source and target must have the same landmark count")
    if mask is None:
        mask = np.ones(ps.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() < 3:
        raise ValueError("alignment needs at least 3 valid landmarks")

    P = ps[mask]
    Q = pt[mask]
    cp = P.mean(axis=0)
    cq = Q.mean(axis=0)
    Pc = P - cp
    Qc = Q - cq

    sv = np.linalg.svd(Pc, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] <= _COLLINEAR_RTOL * sv[0]:
        raise DegenerateShape("valid source points are coincident or collinear")

    denom = float((Pc * Pc).sum())
    a = float((Pc * Qc).sum())
    b = float((Pc[:, 0] * Qc[:, 1] - Pc[:, 1] * Qc[:, 0]).sum())
    rotation = float(np.arctan2(b, a))
    scale = float(np.hypot(a, b)) / denom
    if scale <= 0:
        # target collapses onto a point; keep a unit-scale fit
        scale = 1.0
    c, s = np.cos(rotation), np.sin(rotation)
    R = np.array([[c, -s], [s, c]])
    translation = cq - scale * (R @ cp)
    return SimilarityTransform(scale=scale, rotation=rotation, translation=translation)


def center_and_normalize(vec: np.ndarray) -> np.ndarray:
    """Translate centroid to the origin and scale to unit 2n-vector norm."""
    pts = as_points(vec)
    pts = pts - pts.mean(axis=0)
    flat = pts.reshape(-1)
    norm = np.linalg.norm(flat)
    if norm < 1e-12:
        raise DegenerateShape("all points coincide; cannot normalize")
    return flat / norm


def generalized_procrustes(shapes: list[np.ndarray],
                           tol: float = GPA_TOL,
                           max_iter: int = GPA_MAX_ITER,
                           ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Iterative mutual alignment of many shapes producing a consensus mean.

    Each shape is normalized (centroid to origin, unit norm), all are aligned
    to the running mean, the mean is re-averaged and renormalized, until the
    mean moves less than `tol` or `max_iter` is hit (then a
    NoConvergenceWarning is emitted and the best iterate is returned).

    Returns (mean, aligned): the mean has zero centroid and unit norm, and
    `aligned` holds every input aligned to that final mean.

    Initialization uses the plain average of the normalized shapes, so data
    are assumed to share a broadly similar orientation (true for anatomical
    views); this keeps the result independent of input order.
    """
    if len(shapes) < 2:
        raise ValueError("generalized Procrustes needs at least 2 shapes")
    sizes = {np.asarray(s).size for s in shapes}
    if len(sizes) != 1:
        raise ValueError("all shapes must have the same landmark count")

    normed = [center_and_normalize(s) for s in shapes]
    stack = np.array(normed)
    mean = center_and_normalize(stack.mean(axis=0))

    converged = False
    for _ in range(max_iter):
        aligned = np.array([apply_transform(procrustes_align(s, mean), s)
                            for s in normed])
        new_mean = center_and_normalize(aligned.mean(axis=0))
        delta = np.linalg.norm(new_mean - mean)
        mean = new_mean
        if delta < tol:
            converged = True
            break
    if not converged:
        warnings.warn("generalized Procrustes hit the iteration cap "
                      f"({max_iter}) before tolerance {tol}", NoConvergenceWarning)

    # final pass so every returned shape is optimally aligned to the final mean
    aligned = [apply_transform(procrustes_align(s, mean), s) for s in normed]
    return mean, aligned
