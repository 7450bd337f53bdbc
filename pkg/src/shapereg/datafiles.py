"""File formats binding the modules into reproducible runs.

Images and heatmap dumps share one binary layout: an 8-byte header of H then
W as little-endian uint32, followed by row-major float64 values.  Everything
else is JSON without timestamps, so byte-identical reruns are possible.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import LandmarkSet
from .heatmap import read_grid, write_grid
from .regulation import Branch, PseudoLabel
from .synth import GeneratorSpec, spec_from_dict, spec_to_dict

DATASET_FORMAT_VERSION = 1
PREDICTIONS_FORMAT_VERSION = 1
PSEUDO_LABELS_FORMAT_VERSION = 1


def write_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def save_dataset(out_dir: str | Path, spec: GeneratorSpec,
                 samples: list[tuple[np.ndarray, LandmarkSet]]) -> Path:
    """Write images plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, (image, landmarks) in enumerate(samples):
        rel = f"images/sample_{idx:05d}.bin"
        write_grid(out_dir / rel, image)
        entries.append({
            "image_path": rel,
            "landmarks": landmarks.coords.tolist(),
            "spacing_mm": landmarks.spacing_mm,
        })
    manifest = {
        "version": DATASET_FORMAT_VERSION,
        "spec": spec_to_dict(spec),
        "samples": entries,
    }
    path = out_dir / "manifest.json"
    write_json(path, manifest)
    return path


def load_dataset(manifest_path: str | Path
                 ) -> tuple[GeneratorSpec, list[tuple[np.ndarray, LandmarkSet]]]:
    manifest_path = Path(manifest_path)
    doc = read_json(manifest_path)
    if doc.get("version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {doc.get('version')!r}")
    spec = spec_from_dict(doc["spec"])
    samples = []
    for entry in doc["samples"]:
        image = read_grid(manifest_path.parent / entry["image_path"])
        landmarks = LandmarkSet(np.asarray(entry["landmarks"], dtype=np.float64),
                                spacing_mm=float(entry["spacing_mm"]))
        samples.append((image, landmarks))
    return spec, samples


def save_predictions(path: str | Path, predictions: list[LandmarkSet]) -> None:
    doc = {
        "version": PREDICTIONS_FORMAT_VERSION,
        "predictions": [
            {"coords": p.coords.tolist(), "spacing_mm": p.spacing_mm}
            for p in predictions
        ],
    }
    write_json(path, doc)


def load_predictions(path: str | Path) -> list[LandmarkSet]:
    doc = read_json(path)
    if doc.get("version") != PREDICTIONS_FORMAT_VERSION:
        raise ValueError(f"unsupported predictions version {doc.get('version')!r}")
    out = []
    for entry in doc["predictions"]:
        out.append(LandmarkSet(np.asarray(entry["coords"], dtype=np.float64),
                               spacing_mm=float(entry["spacing_mm"])))
    return out


def save_pseudo_labels(path: str | Path, labels: list[PseudoLabel],
                       z_mm: float) -> None:
    adjusted = sum(1 for lab in labels if lab.branch is Branch.ADJUSTED)
    doc = {
        "version": PSEUDO_LABELS_FORMAT_VERSION,
        "z_mm": z_mm,
        "summary": {
            "adjusted": adjusted,
            "raw_with_exclusions": len(labels) - adjusted,
        },
        "labels": [
            {
                "coords": lab.coords.tolist(),
                "valid": lab.valid.tolist(),
                "branch": lab.branch.value,
                "max_deviation_mm": lab.max_deviation_mm,
                "deviations_mm": lab.deviations_mm.tolist(),
            }
            for lab in labels
        ],
    }
    write_json(path, doc)


def load_pseudo_labels(path: str | Path) -> list[PseudoLabel]:
    doc = read_json(path)
    if doc.get("version") != PSEUDO_LABELS_FORMAT_VERSION:
        raise ValueError(f"unsupported pseudo-label version {doc.get('version')!r}")
    out = []
    for entry in doc["labels"]:
        out.append(PseudoLabel(
            coords=np.asarray(entry["coords"], dtype=np.float64),
            valid=np.asarray(entry["valid"], dtype=bool),
            branch=Branch(entry["branch"]),
            max_deviation_mm=float(entry["max_deviation_mm"]),
            deviations_mm=np.asarray(entry["deviations_mm"], dtype=np.float64),
        ))
    return out


__all__ = [
    "load_dataset", "load_predictions", "load_pseudo_labels", "read_grid",
    "read_json", "save_dataset", "save_predictions", "save_pseudo_labels",
    "write_grid", "write_json",
]
