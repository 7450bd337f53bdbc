import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shapereg.backbone import BackboneConfig
from shapereg.pipeline import Dataset
from shapereg.synth import GeneratorSpec, generate

TOY_BACKBONE = BackboneConfig(n_landmarks=12, image_size=32, pool_size=8,
                              hidden=32, heatmap_size=16)


def make_toy_data(seed=99, n_labeled=6, n_unlabeled=8, n_test=6):
    spec = GeneratorSpec(seed=seed, image_size=32)
    samples = generate(spec, n_labeled + n_unlabeled + n_test)
    labeled = samples[:n_labeled]
    unlabeled = samples[n_labeled:n_labeled + n_unlabeled]
    held_out = samples[n_labeled + n_unlabeled:]
    data = Dataset(labeled=labeled,
                   unlabeled=[img for img, _ in unlabeled],
                   held_out=held_out,
                   unlabeled_truth=[ls for _, ls in unlabeled])
    return spec, data


@pytest.fixture(scope="session")
def toy_problem():
    """Small dataset plus a small backbone for fast pipeline tests."""
    spec, data = make_toy_data()
    return spec, data, TOY_BACKBONE
