"""Task networks: mesh-level classification and vertex-level segmentation.

The pipeline normalizes the mesh, initializes invariant features from
vertex areas (plus any user-provided scalars) and vector channels from
positions and vertex normals, runs a stack of equivariant layers, and
feeds only the invariant features into the task head: a pooling cascade
plus global readout for classification, or a pool/unpool U-shape with skip
concatenation plus a per-vertex head for segmentation. Logits therefore
inherit the invariance of ``h`` by construction.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import hierarchy as hi
from .layers import (ConfigError, EdgeFaceIncidence, MLP, NodeState, emnn_layer,
                     init_layer_params)
from .mesh import geometric_features, normalize_mesh

CHECKPOINT_MAGIC = b"EMNN"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the best ablation point
    (3 layers, 3 hierarchy levels, 2 vector channels)."""

    task: str = "classification"
    num_classes: int = 2
    num_layers: int = 3
    multi_channel: bool = True
    num_channels: int = 2
    egnn_only: bool = False
    use_hierarchy: bool = True
    hierarchy_depth: int = 3
    hidden_dim: int = 64       # d_h, width of invariant features
    message_dim: int = 64      # d, width of edge and face messages
    extra_feature_dim: int = 0
    activation: str = "silu"
    squared_distance: bool = False
    aggregation: str = "sum"
    readout: str = "mean"
    pool_ratio: float = 0.25
    knn_k: int = 3
    radius_scale: float = 2.0
    fps_start: int = 0

    def __post_init__(self):
        if self.task not in ("classification", "segmentation"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.multi_channel and self.num_channels < 2:
            raise ConfigError("multi_channel requires num_channels >= 2")
        if not self.multi_channel and self.num_channels != 1:
            raise ConfigError("single-channel model requires num_channels == 1")
        if self.readout not in ("mean", "max"):
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.aggregation not in ("sum", "mean"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.num_layers < 1 or self.hierarchy_depth < 1:
            raise ConfigError("num_layers and hierarchy_depth must be >= 1")

    @property
    def pooling_steps(self):
        if not self.use_hierarchy:
            return 0
        return self.hierarchy_depth - 1

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


@dataclass
class Prediction:
    """Task logits: (num_classes,) for classification, (n, num_classes)
    for segmentation."""

    logits: np.ndarray
    task: str


@dataclass
class ModelParams:
    """All learnable tensors of one model instance."""

    config: ModelConfig
    embed: MLP
    layers: list
    pool_mlps: list
    unpool_mlps: list
    head: MLP
    seed: int = 0

    def parameters(self):
        params = list(self.embed.parameters())
        for layer in self.layers:
            params.extend(layer.parameters())
        for mlp in self.pool_mlps + self.unpool_mlps:
            params.extend(mlp.parameters())
        params.extend(self.head.parameters())
        return params

    def named_parameters(self):
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ConfigError(f"duplicate parameter name {p.name!r}")
            named[p.name] = p
        return named


def init_model_params(config, seed=0, dtype=np.float64):
    """Build all MLPs; weights are a deterministic function of
    (seed, parameter name) so shared submodules match across variants."""
    c = config.num_channels if config.multi_channel else 1
    d_h, d = config.hidden_dim, config.message_dim
    act = config.activation
    embed = MLP([1 + config.extra_feature_dim, d_h], seed=seed, name="embed",
                activation=act, dtype=dtype)
    layers = [
        init_layer_params(seed, name=f"layer{i}", d_h=d_h, d=d, channels=c,
                          face_pathway=not config.egnn_only, activation=act,
                          dtype=dtype)
        for i in range(config.num_layers)
    ]
    pool_mlps = [MLP([d_h, d_h, d_h], seed=seed, name=f"pool{l}", activation=act,
                     dtype=dtype)
                 for l in range(1, config.pooling_steps + 1)]
    unpool_mlps = []
    if config.task == "segmentation":
        unpool_mlps = [MLP([2 * d_h, d_h, d_h], seed=seed, name=f"unpool{l}",
                           activation=act, dtype=dtype)
                       for l in range(1, config.pooling_steps + 1)]
    head = MLP([d_h, d_h, config.num_classes], seed=seed, name="head",
               activation=act, dtype=dtype)
    return ModelParams(config, embed, layers, pool_mlps, unpool_mlps, head,
                       seed=seed)


def init_features(mesh, config, features=None, dtype=np.float64):
    """Initial node state of a normalized mesh.

    Vector channels are the positions plus (multi-channel) the unit vertex
    normals, zero-padded up to ``num_channels``; the invariant features are
    the mean adjacent-face area plus any user-provided vertex scalars.
    """
    if features is None:
        features = geometric_features(mesh)
    if mesh.vertex_scalars.shape[1] != config.extra_feature_dim:
        raise ConfigError(
            f"mesh carries {mesh.vertex_scalars.shape[1]} vertex scalar column(s), "
            f"config expects {config.extra_feature_dim}")
    channels = [mesh.positions]
    if config.multi_channel:
        channels.append(features.vertex_normals)
    c = config.num_channels if config.multi_channel else 1
    while len(channels) < c:
        channels.append(np.zeros_like(mesh.positions))
    x = np.stack(channels[:c], axis=2).astype(dtype)
    h = np.concatenate([features.vertex_areas[:, None], mesh.vertex_scalars],
                       axis=1).astype(dtype)
    return NodeState(ad.tensor(h, dtype=dtype), ad.tensor(x, dtype=dtype))


@dataclass
class ForwardPass:
    """Everything a forward run produces (used by training and by the
    equivariance harness)."""

    logits: ad.Tensor
    h: ad.Tensor          # invariant features after the layer stack
    X: ad.Tensor          # vector channels after the layer stack
    normalized: object    # the normalized mesh actually processed


def forward_pass(mesh, config, params, dtype=np.float64):
    """Normalize, run the layer stack, and apply the task head."""
    mesh_n = normalize_mesh(mesh)
    state = init_features(mesh_n, config, dtype=dtype)
    state = NodeState(params.embed(state.h), state.X)
    incidence = EdgeFaceIncidence.from_mesh(mesh_n)
    for layer in params.layers:
        state = emnn_layer(state, incidence, layer,
                           squared_distance=config.squared_distance,
                           aggregation=config.aggregation)

    levels = []
    if config.pooling_steps:
        levels = hi.build_hierarchy(
            mesh_n.positions, config.hierarchy_depth,
            ratios=[config.pool_ratio] * config.pooling_steps,
            k=config.knn_k, start=config.fps_start,
            radius_scale=config.radius_scale)

    if config.task == "classification":
        h = state.h
        for level, mlp in zip(levels, params.pool_mlps):
            h = hi.pool(h, level, mlp)
        readout = ad.mean if config.readout == "mean" else ad.max
        pooled = readout(h, axis=0, keepdims=True)
        logits = params.head(pooled)
    else:
        skips = [state.h]
        h = state.h
        for level, mlp in zip(levels, params.pool_mlps):
            h = hi.pool(h, level, mlp)
            skips.append(h)
        for level, mlp, skip in zip(reversed(levels), reversed(params.unpool_mlps),
                                    reversed(skips[:-1])):
            h = hi.unpool(h, skip, level, mlp)
        logits = params.head(h)
    return ForwardPass(logits, state.h, state.X, mesh_n)


def forward_classification(mesh, config, params):
    """Mesh-level logits, invariant to rigid motions of the input."""
    if config.task != "classification":
        raise ConfigError("config.task must be 'classification'")
    out = forward_pass(mesh, config, params)
    return Prediction(out.logits.data.reshape(-1), "classification")


def forward_segmentation(mesh, config, params):
    """Per-vertex logits, invariant to rigid motions of the input."""
    if config.task != "segmentation":
        raise ConfigError("config.task must be 'segmentation'")
    out = forward_pass(mesh, config, params)
    return Prediction(out.logits.data, "segmentation")


def loss(logits, labels):
    """Mean softmax cross-entropy over the logit rows."""
    return ad.cross_entropy(logits, labels)


def save_checkpoint(path, params):
    """Versioned binary checkpoint: magic, version, config JSON, then
    named tensors as little-endian doubles."""
    named = params.named_parameters()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    config_blob = json.dumps({"model": params.config.to_dict(),
                              "seed": params.seed}).encode("utf-8")
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    buf.write(struct.pack("<I", len(named)))
    for name, tensor in sorted(named.items()):
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", tensor.data.ndim))
        for dim in tensor.data.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    with open(path, "wb") as handle:
        handle.write(buf.getvalue())


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


def load_checkpoint(path, dtype=np.float64):
    """Read a checkpoint back into a fresh :class:`ModelParams`."""
    with open(path, "rb") as handle:
        blob = handle.read()
    view = io.BytesIO(blob)

    def read(fmt):
        size = struct.calcsize(fmt)
        data = view.read(size)
        if len(data) != size:
            raise CheckpointError(f"{path}: truncated checkpoint")
        return struct.unpack(fmt, data)

    if view.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
    (version,) = read("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                              f"(expected {CHECKPOINT_VERSION})")
    (config_len,) = read("<I")
    raw = view.read(config_len)
    if len(raw) != config_len:
        raise CheckpointError(f"{path}: truncated checkpoint")
    try:
        config_blob = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block: {exc}") from exc
    config = ModelConfig.from_dict(config_blob["model"])
    params = init_model_params(config, seed=config_blob.get("seed", 0), dtype=dtype)
    named = params.named_parameters()

    (count,) = read("<I")
    seen = set()
    for _ in range(count):
        (name_len,) = read("<H")
        name = view.read(name_len).decode("utf-8")
        (ndim,) = read("<B")
        shape = tuple(read("<Q")[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        raw = view.read(size * 8)
        if len(raw) != size * 8:
            raise CheckpointError(f"{path}: truncated checkpoint")
        data = np.frombuffer(raw, dtype="<f8").reshape(shape)
        if name not in named:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        if named[name].data.shape != shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: "
                                  f"{shape} vs {named[name].data.shape}")
        named[name].data = data.astype(dtype)
        seen.add(name)
    missing = set(named) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameters: {sorted(missing)}")
    return params
