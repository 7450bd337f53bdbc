"""Shared test utilities."""
import numpy as np

from shapereg.heatmap import pixel_centers
from shapereg.regulation import Branch, PseudoLabel


def make_pseudo(coords, valid=None):
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if valid is None:
        valid = np.ones(n, dtype=bool)
    return PseudoLabel(coords=coords, valid=np.asarray(valid, dtype=bool),
                       branch=Branch.ADJUSTED, max_deviation_mm=0.0,
                       deviations_mm=np.zeros(n))


def gaussian_bump(shape, center, sigma=0.05):
    xs, ys = pixel_centers(shape)
    gx, gy = np.meshgrid(xs, ys)
    return np.exp(-((gx - center[0]) ** 2 + (gy - center[1]) ** 2)
                  / (2 * sigma ** 2))
