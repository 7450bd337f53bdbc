"""Shape regulation of pseudo labels: coefficient clamping plus abnormal detection.

Initial landmark estimates for an unlabeled sample are projected onto the
shape model, their coefficients confined to the 3-sigma box of the training
distribution, and reconstructed.  If every landmark moved by at most `z_mm`,
the adjusted shape is the pseudo label; otherwise the raw estimates are kept
and the landmarks that moved more than `z_mm` are marked invalid.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import LandmarkSet, flatten
from .shape_model import ShapeCoefficients, ShapeModel, project, reconstruct

DEFAULT_Z_MM = 2.0


class Branch(str, Enum):
    ADJUSTED = "adjusted"
    RAW_WITH_EXCLUSIONS = "raw_with_exclusions"


@dataclass(frozen=True)
class PseudoLabel:
    """Regulated landmark estimates plus provenance.

    coords: (n, 2) pseudo-label coordinates (adjusted shape on the ADJUSTED
        branch, raw estimates otherwise).
    valid: (n,) flags; False exactly where the adjustment deviation exceeded z.
    deviations_mm: (n,) per-landmark distance between raw and adjusted shape.
    """

    coords: np.ndarray
    valid: np.ndarray
    branch: Branch
    max_deviation_mm: float
    deviations_mm: np.ndarray

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def clamp_coefficients(model: ShapeModel,
                       coeffs: ShapeCoefficients) -> ShapeCoefficients:
    """Confine every coefficient to [-3 sigma_k, +3 sigma_k] componentwise."""
    values = np.asarray(coeffs.values, dtype=np.float64)
    if values.shape != model.sigmas.shape:
        raise ValueError("coefficient length does not match the model")
    bound = 3.0 * model.sigmas
    return coeffs.with_values(np.clip(values, -bound, bound))


def regulate(model: ShapeModel, initial: LandmarkSet,
             z_mm: float = DEFAULT_Z_MM) -> PseudoLabel:
    """Run shape adjustment and abnormal detection on initial estimates.

    Deviation is the per-landmark Euclidean distance between the adjusted and
    the initial shape, measured in the image frame and converted to mm via
    the sample's spacing.  Ties at exactly z count as acceptable.
    """
    if initial.n_landmarks != model.n_landmarks:
        raise ValueError("landmark count does not match the model")
    if not z_mm > 0:
        raise ValueError("z_mm must be positive")

    x_alpha = flatten(initial)
    b_alpha = project(model, x_alpha)
    b_beta = clamp_coefficients(model, b_alpha)
    x_beta = reconstruct(model, b_beta)

    dev = np.linalg.norm(x_beta.reshape(-1, 2) - x_alpha.reshape(-1, 2), axis=1)
    dev_mm = dev * initial.spacing_mm
    max_dev = float(dev_mm.max())

    if max_dev <= z_mm:
        return PseudoLabel(
            coords=x_beta.reshape(-1, 2),
            valid=np.ones(model.n_landmarks, dtype=bool),
            branch=Branch.ADJUSTED,
            max_deviation_mm=max_dev,
            deviations_mm=dev_mm,
        )
    return PseudoLabel(
        coords=x_alpha.reshape(-1, 2),
        valid=dev_mm <= z_mm,
        branch=Branch.RAW_WITH_EXCLUSIONS,
        max_deviation_mm=max_dev,
        deviations_mm=dev_mm,
    )
