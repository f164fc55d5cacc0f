"""Optimization loop, dataset manifests, metrics, and benchmarking.

Datasets are JSON manifests: a list of ``{"mesh": path, "label": int}``
entries (classification) or ``{"mesh": path, "labels": path}`` entries
(segmentation, whitespace-separated per-vertex ints), with paths resolved
relative to the manifest file. Training is deterministic given the seed:
initialization, shuffling order, and the single-threaded update sequence
are all derived from it, and no augmentation of any kind is applied to the
meshes.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import os
import resource
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mesh import load_off, validate
from .model import forward_pass, init_model_params, loss as model_loss

METRIC_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc",
                  "wall_seconds", "peak_bytes")


class DatasetError(ValueError):
    """Malformed manifest or labels."""


class TrainingError(RuntimeError):
    """Aborted optimization (NaN loss and the like)."""


@dataclass
class Sample:
    mesh: object
    labels: np.ndarray  # () for classification, (n,) for segmentation
    path: str


@dataclass
class Dataset:
    task: str
    samples: list

    def __len__(self):
        return len(self.samples)


@dataclass
class TrainConfig:
    """Optimization hyperparameters; the seed fully determines the run.

    ``epochs=None`` resolves per task: 100 for classification, 200 for
    segmentation.
    """

    epochs: int = None
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    precision: str = "float64"
    stop_at_train_acc: float = None

    def __post_init__(self):
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be > 0 and batch_size >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    def resolved_epochs(self, task):
        if self.epochs is not None:
            return self.epochs
        return 100 if task == "classification" else 200

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise DatasetError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def max_loader_threads(default=1):
    """Data-loader parallelism cap from EMNN_THREADS (>= 1)."""
    value = os.environ.get("EMNN_THREADS")
    if not value:
        return default
    try:
        return max(1, int(value))
    except ValueError:
        raise DatasetError(f"EMNN_THREADS must be an integer, got {value!r}") from None


def load_manifest(path, num_classes=None, check=True):
    """Read a dataset manifest and load every mesh (order preserved).

    Mesh loading may fan out over EMNN_THREADS workers; results keep the
    manifest order, so downstream behavior is thread-count independent.
    """
    with open(path) as handle:
        entries = json.load(handle)
    if not isinstance(entries, list) or not entries:
        raise DatasetError(f"{path}: manifest must be a non-empty JSON list")
    base = os.path.dirname(os.path.abspath(path))
    tasks = {"label" in e for e in entries}
    if len(tasks) != 1:
        raise DatasetError(f"{path}: entries mix 'label' and 'labels' keys")
    task = "classification" if tasks.pop() else "segmentation"

    mesh_paths = []
    for i, entry in enumerate(entries):
        if "mesh" not in entry or ("label" not in entry and "labels" not in entry):
            raise DatasetError(f"{path}: entry {i} needs 'mesh' and 'label(s)'")
        mesh_paths.append(os.path.join(base, entry["mesh"]))

    threads = max_loader_threads()
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            meshes = list(pool.map(load_off, mesh_paths))
    else:
        meshes = [load_off(p) for p in mesh_paths]

    samples = []
    for entry, mesh, mesh_path in zip(entries, meshes, mesh_paths):
        if check:
            report = validate(mesh)
            if not report.ok:
                raise DatasetError(f"{mesh_path}: {report.summary()}")
        if task == "classification":
            labels = np.asarray(int(entry["label"]))
        else:
            label_path = os.path.join(base, entry["labels"])
            labels = np.loadtxt(label_path, dtype=np.int64).reshape(-1)
            if labels.shape[0] != mesh.num_vertices:
                raise DatasetError(f"{label_path}: {labels.shape[0]} labels for "
                                   f"{mesh.num_vertices} vertices")
        if num_classes is not None:
            top = int(labels.max()) if labels.ndim else int(labels)
            if top >= num_classes or int(labels.min() if labels.ndim else labels) < 0:
                raise DatasetError(f"{mesh_path}: label outside [0, {num_classes})")
        samples.append(Sample(mesh, labels, mesh_path))
    return Dataset(task, samples)


def write_manifest(path, entries):
    """Write a manifest (list of {"mesh": ..., "label"/"labels": ...})."""
    with open(path, "w") as handle:
        json.dump(entries, handle, indent=1)


class Adam:
    """Adam over the parameter list, applied in fixed parameter order."""

    def __init__(self, params, config):
        self.params = list(params)
        self.lr = config.learning_rate
        self.beta1, self.beta2 = config.beta1, config.beta2
        self.eps = config.adam_eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, grads):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / bias1) / (
                np.sqrt(self.v[i] / bias2) + self.eps)


def _peak_bytes():
    # ru_maxrss is KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def _sample_loss_and_hits(sample, config, params, dtype):
    out = forward_pass(sample.mesh, config, params, dtype=dtype)
    labels = sample.labels.reshape(-1) if config.task == "segmentation" \
        else sample.labels.reshape(1)
    value = model_loss(out.logits, labels)
    predicted = np.argmax(out.logits.data, axis=1)
    return value, int((predicted == labels).sum()), labels.size


def evaluate(dataset, params, config, dtype=np.float64):
    """Accuracy over a split: fraction of meshes correct (classification)
    or fraction of vertices correct (segmentation), plus per-class rates."""
    correct = 0
    total = 0
    per_class = {}
    for sample in dataset.samples:
        out = forward_pass(sample.mesh, config, params, dtype=dtype)
        predicted = np.argmax(out.logits.data, axis=1)
        labels = sample.labels.reshape(-1)
        correct += int((predicted == labels).sum())
        total += labels.size
        for cls in np.unique(labels):
            hit, cnt = per_class.get(int(cls), (0, 0))
            mask = labels == cls
            per_class[int(cls)] = (hit + int((predicted[mask] == cls).sum()),
                                   cnt + int(mask.sum()))
    accuracy = correct / total if total else 0.0
    class_acc = {cls: hit / cnt for cls, (hit, cnt) in sorted(per_class.items())}
    return accuracy, class_acc


def train(train_set, config, train_config, params=None, test_set=None,
          metrics_path=None, log=None):
    """Adam-optimize the model on ``train_set``; returns (params, rows).

    One metrics row per epoch: epoch, train loss, train accuracy, test
    accuracy, wall seconds, peak resident bytes. ``epochs=0`` evaluates the
    initialized parameters and emits a single row. Raises TrainingError
    with step context if the loss turns NaN.
    """
    dtype = train_config.dtype
    epochs = train_config.resolved_epochs(config.task)
    if params is None:
        params = init_model_params(config, seed=train_config.seed, dtype=dtype)
    optimizer = Adam(params.parameters(), train_config)
    shuffle_rng = np.random.default_rng(train_config.seed)
    rows = []

    def record(epoch, train_loss, train_acc, seconds):
        test_acc = ""
        if test_set is not None:
            test_acc = evaluate(test_set, params, config, dtype=dtype)[0]
        row = {"epoch": epoch, "train_loss": train_loss, "train_acc": train_acc,
               "test_acc": test_acc, "wall_seconds": seconds,
               "peak_bytes": _peak_bytes()}
        rows.append(row)
        if log:
            log(f"epoch {epoch}: loss {train_loss:.6f} acc {train_acc:.4f}"
                + (f" test {test_acc:.4f}" if test_acc != "" else ""))
        return row

    if epochs == 0:
        start = time.perf_counter()
        eval_loss, eval_hits, eval_total = 0.0, 0, 0
        for sample in train_set.samples:
            value, hits, total = _sample_loss_and_hits(sample, config, params, dtype)
            eval_loss += value.item()
            eval_hits += hits
            eval_total += total
        record(0, eval_loss / max(len(train_set), 1),
               eval_hits / max(eval_total, 1), time.perf_counter() - start)
    batch = train_config.batch_size
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(train_set))
        epoch_loss = 0.0
        epoch_hits = 0
        epoch_total = 0
        for lo in range(0, len(order), batch):
            indices = order[lo:lo + batch]
            summed = {}
            for step, idx in enumerate(indices, start=lo):
                sample = train_set.samples[idx]
                try:
                    with ad.Tape() as tape:
                        value, hits, total = _sample_loss_and_hits(
                            sample, config, params, dtype)
                    grads = tape.backward(value)
                except FloatingPointError as exc:
                    raise TrainingError(
                        f"NaN loss at epoch {epoch}, step {step} "
                        f"({sample.path}): {exc}") from exc
                for tensor, g in grads.items():
                    if tensor in summed:
                        summed[tensor] = summed[tensor] + g
                    else:
                        summed[tensor] = g
                epoch_loss += value.item()
                epoch_hits += hits
                epoch_total += total
            scale = 1.0 / len(indices)
            optimizer.step({t: g * scale for t, g in summed.items()})
        train_acc = epoch_hits / max(epoch_total, 1)
        record(epoch, epoch_loss / len(train_set), train_acc,
               time.perf_counter() - start)
        if train_config.stop_at_train_acc is not None \
                and train_acc >= train_config.stop_at_train_acc:
            break

    if metrics_path:
        write_metrics(metrics_path, rows)
    return params, rows


def write_metrics(path, rows):
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def benchmark(dataset, config, params=None, epochs=3, seed=0):
    """Wall time per epoch and peak resident memory at batch size 1.

    Runs ``epochs`` full optimization epochs and reports the median epoch
    time, so one-off warmup costs do not skew the complexity fit.
    """
    train_config = TrainConfig(epochs=epochs, seed=seed, batch_size=1)
    if params is None:
        params = init_model_params(config, seed=seed)
    if len(dataset) == 0 or epochs == 0:
        return {"seconds_per_epoch": 0.0, "peak_bytes": _peak_bytes(),
                "epochs": 0, "steps": 0}
    _, rows = train(dataset, config, train_config, params=params)
    seconds = float(np.median([row["wall_seconds"] for row in rows]))
    return {"seconds_per_epoch": seconds, "peak_bytes": _peak_bytes(),
            "epochs": epochs, "steps": epochs * len(dataset)}
