"""Command line interface.

Subcommands: train, eval, benchmark, check-equivariance, info. Options can
come from a flat JSON config file (keys namespaced ``model.*``,
``train.*``, ``hierarchy.*``, ``cli.*``) with command-line flags taking
precedence. Exit codes: 0 success, 1 runtime failure (including a failed
equivariance verification), 2 usage or input error. Errors print a single
``emnn: error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import hierarchy as hi
from .equivariance import run_equivariance_checks
from .layers import ConfigError
from .mesh import (MeshError, OffParseError, face_geometry, load_off,
                   normalize_mesh, validate, vertex_geometry)
from .model import (CheckpointError, ModelConfig, init_model_params,
                    load_checkpoint, save_checkpoint)
from .training import (DatasetError, TrainConfig, TrainingError, benchmark,
                       evaluate, load_manifest, train)


class UsageError(Exception):
    """Bad invocation or unreadable/inconsistent input (exit code 2)."""


_HIERARCHY_KEYS = {
    "depth": "hierarchy_depth",
    "ratio": "pool_ratio",
    "k": "knn_k",
    "radius_scale": "radius_scale",
    "use": "use_hierarchy",
    "fps_start": "fps_start",
}
_CLI_KEYS = {"dataset", "test_dataset", "checkpoint", "mesh", "output",
             "trials", "tolerance"}


def load_config_file(path):
    """Split a flat namespaced JSON config into model/train/cli dicts."""
    try:
        with open(path) as handle:
            flat = json.load(handle)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    if not isinstance(flat, dict):
        raise UsageError(f"config file {path}: expected a JSON object")

    model_keys = set(ModelConfig.__dataclass_fields__) - set(_HIERARCHY_KEYS.values())
    train_keys = set(TrainConfig.__dataclass_fields__)
    model, train_cfg, cli = {}, {}, {}
    for key, value in flat.items():
        scope, _, name = key.partition(".")
        if scope == "model" and name in model_keys:
            model[name] = value
        elif scope == "hierarchy" and name in _HIERARCHY_KEYS:
            model[_HIERARCHY_KEYS[name]] = value
        elif scope == "train" and name in train_keys:
            train_cfg[name] = value
        elif scope == "cli" and name in _CLI_KEYS:
            cli[name] = value
        else:
            raise UsageError(f"config file {path}: unknown key {key!r}")
    return model, train_cfg, cli


def build_configs(args):
    """Merge config file and flags (flags win) into typed configs."""
    model_d, train_d, cli_d = {}, {}, {}
    if args.config:
        model_d, train_d, cli_d = load_config_file(args.config)
    if getattr(args, "seed", None) is not None:
        train_d["seed"] = args.seed
    for name in _CLI_KEYS:
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            cli_d[name] = value
    try:
        model_config = ModelConfig.from_dict(model_d)
        train_config = TrainConfig.from_dict(train_d)
    except (ConfigError, DatasetError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return model_config, train_config, cli_d


def _require(cli_d, key, flag):
    value = cli_d.get(key)
    if value is None:
        raise UsageError(f"missing required option {flag}")
    return value


def _load_dataset(path, model_config):
    if not os.path.exists(path):
        raise UsageError(f"dataset manifest not found: {path}")
    dataset = load_manifest(path, num_classes=model_config.num_classes)
    if dataset.task != model_config.task:
        raise UsageError(f"manifest task {dataset.task!r} does not match "
                         f"configured task {model_config.task!r}")
    return dataset


def cmd_train(args):
    model_config, train_config, cli_d = build_configs(args)
    train_set = _load_dataset(_require(cli_d, "dataset", "--dataset"), model_config)
    test_set = None
    if cli_d.get("test_dataset"):
        test_set = _load_dataset(cli_d["test_dataset"], model_config)
    out_dir = cli_d.get("output", ".")
    os.makedirs(out_dir, exist_ok=True)
    params, rows = train(train_set, model_config, train_config, test_set=test_set,
                         metrics_path=os.path.join(out_dir, "metrics.csv"),
                         log=lambda msg: print(msg))
    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), params)
    print(f"wrote {os.path.join(out_dir, 'checkpoint.bin')} and metrics.csv "
          f"({len(rows)} epochs)")
    return 0


def cmd_eval(args):
    _, _, cli_d = build_configs(args)
    ckpt = _require(cli_d, "checkpoint", "--checkpoint")
    if not os.path.exists(ckpt):
        raise UsageError(f"checkpoint not found: {ckpt}")
    params = load_checkpoint(ckpt)
    dataset = _load_dataset(_require(cli_d, "dataset", "--dataset"), params.config)
    accuracy, per_class = evaluate(dataset, params, params.config)
    print(f"accuracy: {accuracy:.4f}")
    for cls, acc in per_class.items():
        print(f"  class {cls}: {acc:.4f}")
    return 0


def cmd_benchmark(args):
    model_config, train_config, cli_d = build_configs(args)
    dataset = _load_dataset(_require(cli_d, "dataset", "--dataset"), model_config)
    result = benchmark(dataset, model_config, seed=train_config.seed)
    out_dir = cli_d.get("output", ".")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "benchmark.csv")
    with open(path, "w") as handle:
        handle.write("seconds_per_epoch,peak_bytes,epochs,steps\n")
        handle.write(f"{result['seconds_per_epoch']:.6f},{result['peak_bytes']},"
                     f"{result['epochs']},{result['steps']}\n")
    print(f"seconds/epoch: {result['seconds_per_epoch']:.3f}  "
          f"peak bytes: {result['peak_bytes']}")
    print(f"wrote {path}")
    return 0


def variant_matrix(base):
    """The six architecture variants of the evaluation grid."""
    variants = {}
    for face in (False, True):
        prefix = "emnn" if face else "egnn"
        common = base.to_dict()
        common.update(egnn_only=not face)
        variants[prefix] = dict(common, multi_channel=False, num_channels=1,
                                use_hierarchy=False)
        variants[f"{prefix}_mc"] = dict(common, multi_channel=True,
                                        num_channels=max(2, base.num_channels),
                                        use_hierarchy=False)
        variants[f"{prefix}_mc_hier"] = dict(common, multi_channel=True,
                                             num_channels=max(2, base.num_channels),
                                             use_hierarchy=True)
    return {name: ModelConfig.from_dict(d) for name, d in variants.items()}


def cmd_check_equivariance(args):
    model_config, train_config, cli_d = build_configs(args)
    mesh_path = _require(cli_d, "mesh", "--mesh")
    if not os.path.exists(mesh_path):
        raise UsageError(f"mesh not found: {mesh_path}")
    mesh = load_off(mesh_path)
    report = validate(mesh)
    if not report.ok:
        raise UsageError(f"{mesh_path}: {report.summary()}")
    trials = int(cli_d.get("trials", 20))
    tolerance = float(cli_d.get("tolerance", 1e-7))
    if trials < 1:
        raise UsageError("--trials must be >= 1")

    if args.config:
        configs = {"configured": model_config}
    else:
        configs = variant_matrix(model_config)

    all_passed = True
    for name, config in configs.items():
        params = init_model_params(config, seed=train_config.seed)
        report = run_equivariance_checks(mesh, config, params, trials=trials,
                                         tolerance=tolerance,
                                         seed=train_config.seed)
        verdict = "PASS" if report.passed else "FAIL"
        print(f"{name}: {verdict} (tolerance {tolerance:g}, {trials} trials)")
        for line in report.lines():
            print(line)
        all_passed &= report.passed
    print("overall:", "PASS" if all_passed else "FAIL")
    return 0 if all_passed else 1


def cmd_info(args):
    model_config, _, cli_d = build_configs(args)
    mesh_path = _require(cli_d, "mesh", "--mesh")
    try:
        mesh = load_off(mesh_path)
    except FileNotFoundError:
        raise UsageError(f"mesh not found: {mesh_path}") from None
    report = validate(mesh)
    manifold = "yes" if not report.bad_edges else "no"
    print(f"{mesh.num_vertices} vertices, {mesh.num_edges} edges, "
          f"{mesh.num_faces} faces, manifold: {manifold}")
    if report.bad_edges:
        for (a, b), count in report.bad_edges:
            print(f"  edge ({a}, {b}) belongs to {count} faces")
    if report.degenerate_faces:
        print(f"  degenerate faces: {report.degenerate_faces}")
    if report.duplicate_faces:
        print(f"  duplicate faces: {report.duplicate_faces}")
    _, areas = face_geometry(mesh)
    normals, vertex_areas = vertex_geometry(mesh)
    print(f"face area: min {areas.min():.6g} mean {areas.mean():.6g} "
          f"max {areas.max():.6g}")
    print(f"vertex area: mean {vertex_areas.mean():.6g}; "
          f"unit normals: {int((np.abs(np.linalg.norm(normals, axis=1) - 1) < 1e-9).sum())}"
          f"/{mesh.num_vertices}")
    depth = model_config.hierarchy_depth
    sizes = [mesh.num_vertices]
    normalized = normalize_mesh(mesh)
    for level in hi.build_hierarchy(normalized.positions, depth,
                                    ratios=[model_config.pool_ratio] * (depth - 1),
                                    k=model_config.knn_k,
                                    radius_scale=model_config.radius_scale):
        sizes.append(level.num_centroids)
    print(f"hierarchy (depth {depth}): " + " -> ".join(str(s) for s in sizes))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="emnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int, help="seed (overrides train.seed)")
        p.add_argument("--output", help="output directory")
        p.add_argument("--dataset", help="dataset manifest (JSON)")
        p.add_argument("--test-dataset", dest="test_dataset",
                       help="held-out manifest for per-epoch accuracy")
        p.add_argument("--checkpoint", help="model checkpoint path")
        p.add_argument("--mesh", help="mesh file (ASCII OFF)")
        p.add_argument("--trials", type=int, help="number of random trials")
        p.add_argument("--tolerance", type=float, help="deviation tolerance")
        return p

    add("train", cmd_train, help="optimize a model on a dataset manifest")
    add("eval", cmd_eval, help="evaluate a checkpoint on a dataset manifest")
    add("benchmark", cmd_benchmark, help="time one-epoch training and memory")
    add("check-equivariance", cmd_check_equivariance,
        help="verify invariance/equivariance on a mesh")
    add("info", cmd_info, help="inspect a mesh file")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"emnn: error: {exc}", file=sys.stderr)
        return 2
    except (OffParseError, MeshError, DatasetError, CheckpointError,
            ConfigError) as exc:
        print(f"emnn: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, FloatingPointError) as exc:
        print(f"emnn: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"emnn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
