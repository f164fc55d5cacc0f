"""Equivariant message passing layers on meshes.

Each layer keeps two per-vertex states: invariant features ``h`` (n, d_h)
and equivariant vector channels ``X`` (n, 3, c). Edge messages use the
channelwise distances ``|X_i - X_j|``; face messages additionally use the
channelwise cross products of the two winding-ordered edge vectors of each
incident triangle (whose single-channel norm is twice the face area). The
vector update adds channel-mixed combinations of edge differences and face
cross products to ``X``, which keeps ``h`` invariant and ``X`` covariant
under rigid motions; under reflections, covariance holds when the face
winding is reversed along with the transform.

Disabling the face pathway recovers the plain graph (EGNN-style) layer on
the same code path.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class ConfigError(ValueError):
    """Inconsistent layer/model configuration detected at build time."""


_ACTIVATIONS = {"silu": ad.silu, "relu": ad.relu}


def rng_for(seed, name):
    """Deterministic per-parameter rng, independent of creation order."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class MLP:
    """Linear stack with SiLU (default) or ReLU between layers.

    ``sizes`` lists the widths, input first. ``final_activation`` controls
    whether the last linear output is passed through the nonlinearity.
    """

    def __init__(self, sizes, *, seed, name, activation="silu",
                 final_activation=False, dtype=np.float64):
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.sizes = tuple(sizes)
        self.name = name
        self.activation = activation
        self.final_activation = final_activation
        rng = rng_for(seed, name)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            w = rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)
            self.weights.append(ad.parameter(w, name=f"{name}.w{i}"))
            self.biases.append(ad.parameter(np.zeros(fan_out, dtype=dtype),
                                            name=f"{name}.b{i}"))

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def __call__(self, x):
        act = _ACTIVATIONS[self.activation]
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.matmul(x, w) + b
            if i < n_layers - 1 or self.final_activation:
                x = act(x)
        return x

    def parameters(self):
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params


@dataclass
class NodeState:
    """Per-vertex invariant features ``h`` and vector channels ``X``."""

    h: ad.Tensor   # (n, d_h)
    X: ad.Tensor   # (n, 3, c)

    @property
    def num_nodes(self):
        return self.h.shape[0]

    @property
    def num_channels(self):
        return self.X.shape[2]


class EdgeFaceIncidence:
    """Flattened edge and face-corner index arrays of a mesh.

    Edges are expanded to both directions and sorted by (src, dst); each
    face contributes one corner entry per vertex with (j, k) taken in the
    stored winding rotated so the corner vertex comes first (cyclic
    rotation preserves the face normal's side). Both orders are pinned so
    segment reductions have a reproducible summation order.
    """

    def __init__(self, num_vertices, edges, faces):
        self.num_vertices = int(num_vertices)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        directed = np.concatenate([edges, edges[:, ::-1]]) if len(edges) else edges
        order = np.lexsort((directed[:, 1], directed[:, 0])) if len(directed) else []
        directed = directed[order] if len(directed) else directed.reshape(0, 2)
        self.edge_src = np.ascontiguousarray(directed[:, 0]) if len(directed) \
            else np.zeros(0, dtype=np.int64)
        self.edge_dst = np.ascontiguousarray(directed[:, 1]) if len(directed) \
            else np.zeros(0, dtype=np.int64)

        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(faces):
            corners = np.concatenate([faces, faces[:, [1, 2, 0]], faces[:, [2, 0, 1]]])
            order = np.lexsort((corners[:, 2], corners[:, 1], corners[:, 0]))
            corners = corners[order]
        else:
            corners = np.zeros((0, 3), dtype=np.int64)
        self.corner_i = np.ascontiguousarray(corners[:, 0])
        self.corner_j = np.ascontiguousarray(corners[:, 1])
        self.corner_k = np.ascontiguousarray(corners[:, 2])

    @classmethod
    def from_mesh(cls, mesh):
        return cls(mesh.num_vertices, mesh.edges, mesh.faces)

    @property
    def num_edge_entries(self):
        return self.edge_src.shape[0]

    @property
    def num_corner_entries(self):
        return self.corner_i.shape[0]


@dataclass
class LayerParams:
    """MLPs of one layer: edge message (phi_e), face message (phi_s),
    invariant update (phi_h), and the channel-mixing heads (phi_x, phi_t)
    whose flat outputs reshape to (c_in, c_out) matrices."""

    phi_e: MLP
    phi_s: MLP | None
    phi_h: MLP
    phi_x: MLP
    phi_t: MLP | None
    channels_in: int
    channels_out: int

    def __post_init__(self):
        c_mix = self.channels_in * self.channels_out
        if self.phi_x.out_dim != c_mix:
            raise ConfigError(f"phi_x outputs {self.phi_x.out_dim}, expected "
                              f"{self.channels_in}x{self.channels_out}")
        if self.phi_t is not None and self.phi_t.out_dim != self.phi_x.out_dim:
            raise ConfigError("phi_x and phi_t mixing outputs disagree: "
                              f"{self.phi_x.out_dim} vs {self.phi_t.out_dim}")
        if self.channels_in != self.channels_out:
            raise ConfigError("residual vector update requires equal input and "
                              f"output channels, got {self.channels_in} -> "
                              f"{self.channels_out}")

    @property
    def face_pathway(self):
        return self.phi_s is not None

    def parameters(self):
        params = []
        for mlp in (self.phi_e, self.phi_s, self.phi_h, self.phi_x, self.phi_t):
            if mlp is not None:
                params.extend(mlp.parameters())
        return params


def init_layer_params(seed, *, name, d_h, d, channels, face_pathway=True,
                      activation="silu", dtype=np.float64):
    """Build one layer's MLPs with deterministic per-name seeding.

    The same (seed, name) always yields the same phi_e/phi_h/phi_x weights
    whether or not the face pathway exists, so the graph-only layer is the
    mesh layer minus its face terms, parameter for parameter.
    """
    c = channels
    common = dict(seed=seed, activation=activation, dtype=dtype)
    phi_e = MLP([2 * d_h + c, d, d, d], name=f"{name}.phi_e",
                final_activation=True, **common)
    phi_h = MLP([d_h + 2 * d, d_h, d_h], name=f"{name}.phi_h", **common)
    phi_x = MLP([d, d, c * c], name=f"{name}.phi_x", **common)
    phi_s = phi_t = None
    if face_pathway:
        phi_s = MLP([2 * d_h + c, d, d, d], name=f"{name}.phi_s",
                    final_activation=True, **common)
        phi_t = MLP([d, d, c * c], name=f"{name}.phi_t", **common)
    return LayerParams(phi_e, phi_s, phi_h, phi_x, phi_t,
                       channels_in=c, channels_out=c)


@dataclass
class LayerMessages:
    """Per-edge and per-face-corner message tensors of one layer pass."""

    edge: ad.Tensor                 # (E, d)
    edge_diff: ad.Tensor            # (E, 3, c) gathered X_i - X_j
    face: ad.Tensor | None          # (T, d)
    face_cross: ad.Tensor | None    # (T, 3, c)


def egnn_message(state, incidence, params, *, squared_distance=False):
    """Edge messages phi_e(h_i, h_j, |X_i - X_j| per channel)."""
    src, dst = incidence.edge_src, incidence.edge_dst
    h_i = ad.gather(state.h, src)
    h_j = ad.gather(state.h, dst)
    diff = ad.gather(state.X, src) - ad.gather(state.X, dst)
    dist = ad.row_norm(diff)
    if squared_distance:
        dist = ad.mul(dist, dist)
    message = params.phi_e(ad.concat([h_i, h_j, dist]))
    return message, diff


def emnn_face_message(state, incidence, params):
    """Face-corner messages phi_s(h_i, h_j + h_k, |cross| per channel).

    The cross product of the two winding-ordered edge vectors is taken per
    channel; its norm (twice the triangle area in the position channel) is
    invariant under rigid motions and under swapping j and k.
    """
    ci, cj, ck = incidence.corner_i, incidence.corner_j, incidence.corner_k
    h_i = ad.gather(state.h, ci)
    h_jk = ad.gather(state.h, cj) + ad.gather(state.h, ck)
    x_i = ad.gather(state.X, ci)
    cross = ad.cross_rows(ad.gather(state.X, cj) - x_i, ad.gather(state.X, ck) - x_i)
    message = params.phi_s(ad.concat([h_i, h_jk, ad.row_norm(cross)]))
    return message, cross


def _aggregate(values, ids, num_segments, mode):
    agg = ad.segment_sum(values, ids, num_segments)
    if mode == "mean":
        counts = np.bincount(ids, minlength=num_segments).astype(values.dtype)
        scale = (1.0 / np.maximum(counts, 1.0)).reshape(
            (num_segments,) + (1,) * (len(agg.shape) - 1))
        agg = ad.mul(agg, scale)
    return agg


def emnn_update_h(state, messages, incidence, params, *, aggregation="sum"):
    """h_i <- phi_h(h_i, sum of edge messages, sum of face messages)."""
    n = state.num_nodes
    agg_e = _aggregate(messages.edge, incidence.edge_src, n, aggregation)
    if messages.face is not None:
        agg_f = _aggregate(messages.face, incidence.corner_i, n, aggregation)
    else:
        agg_f = ad.tensor(np.zeros((n, params.phi_e.out_dim), dtype=state.h.dtype))
    return params.phi_h(ad.concat([state.h, agg_e, agg_f]))


def _mixed(vectors, weights_flat, c_in, c_out):
    mix = ad.reshape(weights_flat, (vectors.shape[0], c_in, c_out))
    return ad.matmul(vectors, mix)


def emnn_update_x(state, messages, incidence, params, *, aggregation="sum"):
    """X_i <- X_i + sum (X_i - X_j) phi_x(m_ij) + sum cross_jk phi_t(m_ijk)."""
    n = state.num_nodes
    c_in, c_out = params.channels_in, params.channels_out
    mixed_e = _mixed(messages.edge_diff, params.phi_x(messages.edge), c_in, c_out)
    x = state.X + _aggregate(mixed_e, incidence.edge_src, n, aggregation)
    if messages.face_cross is not None:
        mixed_f = _mixed(messages.face_cross, params.phi_t(messages.face), c_in, c_out)
        x = x + _aggregate(mixed_f, incidence.corner_i, n, aggregation)
    return x


def emnn_layer(state, incidence, params, *, squared_distance=False,
               aggregation="sum"):
    """One full mesh layer; the face pathway runs when the params carry it
    and the mesh has faces."""
    m_edge, edge_diff = egnn_message(state, incidence, params,
                                     squared_distance=squared_distance)
    if params.face_pathway and incidence.num_corner_entries:
        m_face, face_cross = emnn_face_message(state, incidence, params)
    else:
        m_face = face_cross = None
    messages = LayerMessages(m_edge, edge_diff, m_face, face_cross)
    h = emnn_update_h(state, messages, incidence, params, aggregation=aggregation)
    x = emnn_update_x(state, messages, incidence, params, aggregation=aggregation)
    return NodeState(h, x)


def egnn_layer(state, incidence, params, *, squared_distance=False,
               aggregation="sum"):
    """Graph-only layer: the mesh layer with the face pathway disabled."""
    graph_params = LayerParams(params.phi_e, None, params.phi_h, params.phi_x, None,
                               channels_in=params.channels_in,
                               channels_out=params.channels_out)
    return emnn_layer(state, incidence, graph_params,
                      squared_distance=squared_distance, aggregation=aggregation)
