"""Shared fixtures: synthetic datasets written to disk for CLI tests."""

import json

import numpy as np
import pytest

from emnn import shapes
from emnn.mesh import write_off
from emnn.training import Dataset, Sample


def synthetic_samples(per_class=4, sphere_seed=100, cube_seed=200):
    """Small two-class sample list: noised icospheres vs noised cubes."""
    samples = []
    for i in range(per_class):
        mesh = shapes.noised(shapes.icosphere(1), 0.02, seed=sphere_seed + i)
        samples.append(Sample(mesh, np.asarray(0), f"sphere{i}"))
    for i in range(per_class):
        mesh = shapes.noised(shapes.cube(1), 0.02, seed=cube_seed + i)
        samples.append(Sample(mesh, np.asarray(1), f"cube{i}"))
    return samples


def write_classification_dataset(directory, per_class=3):
    """Materialize meshes plus a manifest; returns the manifest path."""
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(synthetic_samples(per_class)):
        name = f"mesh{i}.off"
        write_off(sample.mesh, directory / name)
        entries.append({"mesh": name, "label": int(sample.labels)})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps(entries))
    return str(manifest)


def write_segmentation_dataset(directory, count=3):
    """Tiny per-vertex labeling task: label = upper/lower hemisphere."""
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        mesh = shapes.noised(shapes.icosphere(1), 0.01, seed=50 + i)
        name = f"mesh{i}.off"
        write_off(mesh, directory / name)
        labels = (mesh.positions[:, 2] > 0).astype(int)
        label_name = f"labels{i}.txt"
        (directory / label_name).write_text(" ".join(map(str, labels)))
        entries.append({"mesh": name, "labels": label_name})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps(entries))
    return str(manifest)


@pytest.fixture
def classification_manifest(tmp_path):
    return write_classification_dataset(tmp_path / "data")


@pytest.fixture
def segmentation_manifest(tmp_path):
    return write_segmentation_dataset(tmp_path / "segdata")


@pytest.fixture
def tiny_dataset():
    samples = synthetic_samples(per_class=3)
    return Dataset("classification", samples)
