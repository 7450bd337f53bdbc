"""PCA statistical shape model: build, project, reconstruct, normality check.

The model is the classic point-distribution model: a mean shape plus K
orthonormal deformation components, fitted to Procrustes-aligned training
shapes.  Projection uses a tangent-gauge alignment (the aligned shape is
rescaled so its inner product with the mean equals the mean's squared norm),
which removes the radial shrinkage of raw least-squares Procrustes and makes
project/reconstruct an exact round trip for in-model shapes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.stats

from .errors import (DegenerateSample, DegenerateShape, InsufficientData,
                     SampleSizeOutOfRange, ZeroVariance)
from .geometry import (LandmarkSet, SimilarityTransform, apply_transform,
                       center_and_normalize, flatten, generalized_procrustes,
                       procrustes_align)

MODEL_FORMAT_VERSION = 1

_GAUGE_TOL = 1e-13
_GAUGE_MAX_ITER = 50


@dataclass(frozen=True)
class ShapeModel:
    """Mean shape, principal components and per-component spreads.

    mean: shape vector (2n,), zero centroid, near-unit norm.
    components: (2n, K) with orthonormal columns.
    sigmas: (K,) sample standard deviation of each training coefficient,
        non-increasing.
    """

    mean: np.ndarray
    components: np.ndarray
    sigmas: np.ndarray
    variance_fraction: float
    n_landmarks: int
    n_train: int

    @property
    def n_modes(self) -> int:
        return self.components.shape[1]


@dataclass(frozen=True)
class ShapeCoefficients:
    """Mode coefficients of one shape plus the transform used to project it."""

    values: np.ndarray
    transform: SimilarityTransform

    def with_values(self, values: np.ndarray) -> "ShapeCoefficients":
        return replace(self, values=np.asarray(values, dtype=np.float64))


def _tangent_align(shape_vec: np.ndarray, mean: np.ndarray) -> SimilarityTransform:
    """Procrustes-align, then rescale about the origin so that
    <aligned, mean> = <mean, mean> (tangent gauge)."""
    t = procrustes_align(shape_vec, mean)
    aligned = apply_transform(t, shape_vec)
    denom = float(aligned @ mean)
    if denom <= 1e-12:
        raise DegenerateShape("aligned shape orthogonal to the mean shape")
    kappa = float(mean @ mean) / denom
    return SimilarityTransform(scale=t.scale * kappa, rotation=t.rotation,
                               translation=kappa * t.translation)


def build_shape_model(labeled: list[LandmarkSet],
                      variance_target: float = 0.9999) -> ShapeModel:
    """Fit the PCA shape model to fully-labeled landmark sets.

    Shapes are mutually aligned by generalized Procrustes analysis, brought
    into the tangent gauge of the consensus mean, and decomposed by PCA of
    their residuals.  K is the smallest component count whose cumulative
    explained variance reaches `variance_target`.
    """
    if len(labeled) < 2:
        raise InsufficientData("need at least 2 labeled samples")
    if not 0 < variance_target <= 1:
        raise ValueError("variance_target must be in (0, 1]")
    n = labeled[0].n_landmarks
    for ls in labeled:
        if ls.n_landmarks != n:
            raise ValueError("all labeled sets must have the same landmark count")
        if not ls.valid.all():
            raise ValueError("shape model training requires fully valid landmarks")

    vecs = [flatten(ls) for ls in labeled]
    gpa_mean, _ = generalized_procrustes(vecs)

    # tangent-gauge fixed point: the mean equals the average of the aligned,
    # gauge-rescaled shapes, so residuals have exactly zero empirical mean
    normed = [center_and_normalize(v) for v in vecs]
    mean = gpa_mean
    for _ in range(_GAUGE_MAX_ITER):
        aligned = np.array([apply_transform(_tangent_align(v, mean), v)
                            for v in normed])
        new_mean = aligned.mean(axis=0)
        delta = np.linalg.norm(new_mean - mean)
        mean = new_mean
        if delta < _GAUGE_TOL:
            break

    resid = aligned - mean
    cov = resid.T @ resid / (len(vecs) - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.clip(eigvals[::-1], 0.0, None)
    eigvecs = eigvecs[:, ::-1]

    total = float(eigvals.sum())
    if total < 1e-24:
        raise ZeroVariance("training shapes are identical; nothing to model")
    cumfrac = np.cumsum(eigvals) / total
    k = int(np.searchsorted(cumfrac, variance_target - 1e-12) + 1)
    k = min(k, 2 * n, len(vecs) - 1)

    components = eigvecs[:, :k]
    # deterministic sign: largest-magnitude entry of each column positive
    for j in range(k):
        col = components[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            components[:, j] = -col

    coeffs = resid @ components
    sigmas = coeffs.std(axis=0, ddof=1)
    if np.any(sigmas <= 0):
        raise ZeroVariance("a retained component has zero coefficient spread")
    order = np.argsort(-sigmas, kind="stable")
    return ShapeModel(
        mean=mean,
        components=np.ascontiguousarray(components[:, order]),
        sigmas=sigmas[order],
        variance_fraction=float(cumfrac[k - 1]),
        n_landmarks=n,
        n_train=len(vecs),
    )


def project(model: ShapeModel, shape_vec: np.ndarray) -> ShapeCoefficients:
    """Coefficients of a shape in the model's mode basis.

    The shape is aligned to the mean with a tangent-gauge similarity
    transform (recorded for reconstruction); coefficients are the orthonormal
    components' inner products with the aligned residual.
    """
    shape_vec = np.asarray(shape_vec, dtype=np.float64)
    if shape_vec.size != 2 * model.n_landmarks:
        raise ValueError("shape vector length does not match the model")
    t = _tangent_align(shape_vec, model.mean)
    aligned = apply_transform(t, shape_vec)
    values = model.components.T @ (aligned - model.mean)
    return ShapeCoefficients(values=values, transform=t)


def reconstruct(model: ShapeModel, coeffs: ShapeCoefficients) -> np.ndarray:
    """Inverse of project: mean + components @ values, mapped back to the
    original image frame through the recorded transform."""
    values = np.asarray(coeffs.values, dtype=np.float64)
    if values.shape != (model.n_modes,):
        raise ValueError("coefficient length does not match the model")
    in_frame = model.mean + model.components @ values
    return apply_transform(coeffs.transform.inverse(), in_frame)


def shapiro_wilk(samples) -> tuple[float, float]:
    """Shapiro-Wilk W statistic and p-value (Royston's approximation).

    Diagnostic only; never gates the pipeline.
    """
    arr = np.asarray(samples, dtype=np.float64).reshape(-1)
    if not 3 <= arr.size <= 5000:
        raise SampleSizeOutOfRange(
            f"Shapiro-Wilk needs 3..5000 samples, got {arr.size}")
    if np.ptp(arr) == 0:
        raise DegenerateSample("all sample values identical")
    w, p = scipy.stats.shapiro(arr)
    return float(w), float(p)


def model_to_dict(model: ShapeModel) -> dict:
    return {
        "version": MODEL_FORMAT_VERSION,
        "n_landmarks": model.n_landmarks,
        "mean": model.mean.tolist(),
        "components": model.components.tolist(),
        "sigmas": model.sigmas.tolist(),
        "variance_fraction": model.variance_fraction,
        "n_train": model.n_train,
    }


def model_from_dict(doc: dict) -> ShapeModel:
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported shape model version {doc.get('version')!r}")
    return ShapeModel(
        mean=np.asarray(doc["mean"], dtype=np.float64),
        components=np.asarray(doc["components"], dtype=np.float64),
        sigmas=np.asarray(doc["sigmas"], dtype=np.float64),
        variance_fraction=float(doc["variance_fraction"]),
        n_landmarks=int(doc["n_landmarks"]),
        n_train=int(doc["n_train"]),
    )


def save_model(model: ShapeModel, path: str | Path) -> None:
    """Write the model as JSON; floats round-trip bit-faithfully."""
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_model(path: str | Path) -> ShapeModel:
    return model_from_dict(json.loads(Path(path).read_text()))
