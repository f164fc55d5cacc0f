"""Layer-level message passing: invariances, oracles, and the graph-only
reduction."""

import copy
from types import SimpleNamespace

import numpy as np
import pytest

from emnn import autodiff as ad
from emnn import shapes
from emnn.equivariance import random_orthogonal
from emnn.layers import (ConfigError, EdgeFaceIncidence, LayerMessages,
                         LayerParams, MLP, NodeState, egnn_layer, egnn_message,
                         emnn_face_message, emnn_layer, emnn_update_h,
                         emnn_update_x, init_layer_params, rng_for)
from emnn.mesh import face_geometry

D_H, D = 8, 8


def make_state(mesh, channels=1, seed=0, d_h=D_H):
    rng = np.random.default_rng(seed)
    n = mesh.num_vertices
    h = rng.normal(size=(n, d_h))
    cols = [np.array(mesh.positions)]
    if channels > 1:
        cols.append(rng.normal(size=(n, 3)))
    while len(cols) < channels:
        cols.append(np.zeros((n, 3)))
    return NodeState(ad.tensor(h), ad.tensor(np.stack(cols, axis=2)))


def make_params(channels=1, seed=0, face=True):
    return init_layer_params(seed, name="layer", d_h=D_H, d=D, channels=channels,
                             face_pathway=face)


def transform_state(state, q, t):
    x = np.einsum("ab,nbc->nac", q, state.X.data)
    x[:, :, 0] += t[None, :]
    return NodeState(ad.tensor(state.h.data.copy()), ad.tensor(x))


# --- parameter plumbing ----------------------------------------------------

def test_mlp_weights_depend_only_on_seed_and_name():
    a = MLP([3, 4, 2], seed=5, name="phi")
    MLP([9, 9], seed=5, name="other")  # consumes nothing shared
    b = MLP([3, 4, 2], seed=5, name="phi")
    for wa, wb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(wa.data, wb.data)
    c = MLP([3, 4, 2], seed=6, name="phi")
    assert not np.array_equal(a.weights[0].data, c.weights[0].data)


def test_rng_for_is_order_independent():
    np.testing.assert_array_equal(rng_for(1, "x").normal(size=4),
                                  rng_for(1, "x").normal(size=4))


def test_mixing_dims_must_agree():
    phi_e = MLP([2 * D_H + 1, D, D], seed=0, name="e")
    phi_h = MLP([D_H + 2 * D, D_H], seed=0, name="h")
    phi_x = MLP([D, 1], seed=0, name="x")
    phi_t = MLP([D, 4], seed=0, name="t")
    with pytest.raises(ConfigError, match="disagree"):
        LayerParams(phi_e, None, phi_h, phi_x, phi_t,
                    channels_in=1, channels_out=1)


def test_residual_requires_square_mixing():
    phi_e = MLP([2 * D_H + 2, D, D], seed=0, name="e")
    phi_h = MLP([D_H + 2 * D, D_H], seed=0, name="h")
    phi_x = MLP([D, 6], seed=0, name="x")
    with pytest.raises(ConfigError, match="channels"):
        LayerParams(phi_e, None, phi_h, phi_x, None,
                    channels_in=2, channels_out=3)


# --- edge messages -----------------------------------------------------------

def test_coincident_nodes_message_is_finite():
    state = NodeState(ad.tensor(np.zeros((2, D_H))),
                      ad.tensor(np.zeros((2, 3, 1))))
    inc = EdgeFaceIncidence(2, [[0, 1]], [])
    message, _ = egnn_message(state, inc, make_params())
    assert np.isfinite(message.data).all()


@pytest.mark.parametrize("seed", range(5))
def test_edge_message_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    mesh = shapes.tetrahedron()
    state = make_state(mesh, channels=2, seed=seed)
    params = make_params(channels=2)
    inc = EdgeFaceIncidence.from_mesh(mesh)
    base, _ = egnn_message(state, inc, params)
    q = random_orthogonal(rng, det=1.0)
    moved, _ = egnn_message(transform_state(state, q, rng.normal(size=3)),
                            inc, params)
    assert np.max(np.abs(moved.data - base.data)) < 1e-10


def test_multichannel_distance_argument_matches_oracle():
    mesh = shapes.tetrahedron()
    state = make_state(mesh, channels=2, seed=3)
    inc = EdgeFaceIncidence.from_mesh(mesh)
    # identity message head exposes phi_e's input; last 2 columns = distances
    probe = SimpleNamespace(phi_e=lambda x: x)
    message, _ = egnn_message(state, inc, probe)
    x = state.X.data
    for row, (i, j) in enumerate(zip(inc.edge_src, inc.edge_dst)):
        for ch in range(2):
            expected = np.sqrt(np.sum((x[i, :, ch] - x[j, :, ch]) ** 2) + 1e-9)
            assert abs(message.data[row, 2 * D_H + ch] - expected) < 1e-12


# --- face messages -----------------------------------------------------------

def test_face_message_swap_jk_is_bitwise_invariant():
    mesh = shapes.tetrahedron()
    state = make_state(mesh, channels=1, seed=1)
    params = make_params()
    inc = EdgeFaceIncidence.from_mesh(mesh)
    swapped = copy.copy(inc)
    swapped.corner_j = inc.corner_k.copy()
    swapped.corner_k = inc.corner_j.copy()
    base, _ = emnn_face_message(state, inc, params)
    flipped, _ = emnn_face_message(state, swapped, params)
    np.testing.assert_array_equal(base.data, flipped.data)


def test_degenerate_face_message_is_finite():
    mesh_positions = [[0, 0, 0], [1, 0, 0], [2, 0, 0]]
    state = NodeState(ad.tensor(np.zeros((3, D_H))),
                      ad.tensor(np.asarray(mesh_positions, dtype=float)[:, :, None]))
    inc = EdgeFaceIncidence(3, [[0, 1], [1, 2], [0, 2]], [[0, 1, 2]])
    message, cross = emnn_face_message(state, inc, make_params())
    assert np.isfinite(message.data).all()
    np.testing.assert_array_equal(cross.data, 0.0)


def test_face_norm_argument_is_twice_area():
    mesh = shapes.triangle().with_positions([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    state = NodeState(ad.tensor(np.zeros((3, D_H))),
                      ad.tensor(np.array(mesh.positions)[:, :, None]))
    inc = EdgeFaceIncidence.from_mesh(mesh)
    probe = SimpleNamespace(phi_s=lambda x: x)
    message, _ = emnn_face_message(state, inc, probe)
    norm_column = message.data[:, -1]
    _, areas = face_geometry(mesh)
    np.testing.assert_allclose(norm_column, 2.0 * areas[0], atol=1e-8)
    np.testing.assert_allclose(norm_column, 1.0, atol=1e-8)


# --- h update ------------------------------------------------------------------

def test_isolated_node_gets_zero_aggregates():
    params = make_params()
    h = np.random.default_rng(0).normal(size=(3, D_H))
    state = NodeState(ad.tensor(h), ad.tensor(np.zeros((3, 3, 1))))
    inc = EdgeFaceIncidence(3, [[0, 1]], [])
    message, diff = egnn_message(state, inc, params)
    out = emnn_update_h(state, LayerMessages(message, diff, None, None), inc, params)
    zeros = np.zeros((1, 2 * D))
    expected = params.phi_h(ad.concat([ad.tensor(h[2:3]), ad.tensor(zeros)]))
    # single-row matmul may take a different BLAS path than the batch
    np.testing.assert_allclose(out.data[2], expected.data[0], atol=1e-12)


def test_two_node_graph_matches_manual_unrolling():
    params = make_params()
    rng = np.random.default_rng(5)
    h = rng.normal(size=(2, D_H))
    x = rng.normal(size=(2, 3, 1))
    state = NodeState(ad.tensor(h), ad.tensor(x))
    inc = EdgeFaceIncidence(2, [[0, 1]], [])
    out = emnn_layer(state, inc, params)

    # oracle: evaluate the update by hand for node 0
    dist = np.sqrt(np.sum((x[0, :, 0] - x[1, :, 0]) ** 2) + 1e-9)
    m_01 = params.phi_e(ad.tensor(np.concatenate([h[0], h[1], [dist]])[None, :]))
    agg = np.concatenate([h[0][None, :], m_01.data, np.zeros((1, D))], axis=1)
    expected_h0 = params.phi_h(ad.tensor(agg))
    np.testing.assert_allclose(out.h.data[0], expected_h0.data[0], atol=1e-12)

    mix = params.phi_x(m_01).data.reshape(1, 1)
    expected_x0 = x[0] + (x[0] - x[1]) * mix[0, 0]
    np.testing.assert_allclose(out.X.data[0], expected_x0, atol=1e-12)


# --- X update -------------------------------------------------------------------

def test_all_positions_equal_keeps_x_unchanged():
    params = make_params()
    h = np.random.default_rng(1).normal(size=(3, D_H))
    x = np.ones((3, 3, 1))
    state = NodeState(ad.tensor(h), ad.tensor(x))
    inc = EdgeFaceIncidence(3, [[0, 1], [1, 2], [0, 2]], [[0, 1, 2]])
    out = emnn_layer(state, inc, params)
    np.testing.assert_array_equal(out.X.data, x)


def zero_mlp(mlp):
    mlp.weights[-1].data = np.zeros_like(mlp.weights[-1].data)
    mlp.biases[-1].data = np.zeros_like(mlp.biases[-1].data)


def test_face_term_reproduces_face_normals():
    # phi_x == 0 and phi_t == 1 turn the update into a sum of face normals
    mesh = shapes.triangle()
    params = make_params()
    zero_mlp(params.phi_x)
    zero_mlp(params.phi_t)
    params.phi_t.biases[-1].data = np.ones(1)
    state = NodeState(ad.tensor(np.zeros((3, D_H))),
                      ad.tensor(np.array(mesh.positions)[:, :, None]))
    inc = EdgeFaceIncidence.from_mesh(mesh)
    out = emnn_layer(state, inc, params)
    delta = out.X.data[:, :, 0] - state.X.data[:, :, 0]
    normals, _ = face_geometry(mesh)
    for vertex in range(3):
        np.testing.assert_allclose(delta[vertex], normals[0], atol=1e-12)


# --- full layer ------------------------------------------------------------------

def test_corner_entries_respect_stored_winding():
    # each tau entry's cross product points to the stored face normal's side
    for mesh in (shapes.tetrahedron(), shapes.icosphere(1), shapes.blob()):
        inc = EdgeFaceIncidence.from_mesh(mesh)
        assert inc.num_corner_entries == 3 * mesh.num_faces
        p = mesh.positions
        cross = np.cross(p[inc.corner_j] - p[inc.corner_i],
                         p[inc.corner_k] - p[inc.corner_i])
        normal_of = {tuple(sorted(f)): n
                     for f, n in zip(mesh.faces, face_geometry(mesh)[0])}
        for row in range(inc.num_corner_entries):
            key = tuple(sorted((inc.corner_i[row], inc.corner_j[row],
                                inc.corner_k[row])))
            assert np.dot(cross[row], normal_of[key]) > 0


def test_faceless_emnn_layer_is_bitwise_egnn_layer():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n = 7
        edges = [[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 6], [0, 6], [2, 5]]
        inc = EdgeFaceIncidence(n, edges, [])
        params = make_params(channels=2, seed=seed)
        state = NodeState(ad.tensor(rng.normal(size=(n, D_H))),
                          ad.tensor(rng.normal(size=(n, 3, 2))))
        full = emnn_layer(state, inc, params)
        graph = egnn_layer(state, inc, params)
        np.testing.assert_array_equal(full.h.data, graph.h.data)
        np.testing.assert_array_equal(full.X.data, graph.X.data)


def test_egnn_flag_strips_face_terms_on_meshes():
    mesh = shapes.tetrahedron()
    state = make_state(mesh, channels=1, seed=2)
    params = make_params()
    inc = EdgeFaceIncidence.from_mesh(mesh)
    stripped = LayerParams(params.phi_e, None, params.phi_h, params.phi_x, None,
                           channels_in=1, channels_out=1)
    a = egnn_layer(state, inc, params)
    b = emnn_layer(state, inc, stripped)
    np.testing.assert_array_equal(a.h.data, b.h.data)
    np.testing.assert_array_equal(a.X.data, b.X.data)
    full = emnn_layer(state, inc, params)
    assert np.max(np.abs(full.h.data - a.h.data)) > 1e-6


@pytest.mark.parametrize("channels", [1, 2])
@pytest.mark.parametrize("seed", range(3))
def test_layer_equivariance_proper_motion(channels, seed):
    rng = np.random.default_rng(seed + 100)
    mesh = shapes.tetrahedron()
    state = make_state(mesh, channels=channels, seed=seed)
    params = make_params(channels=channels, seed=seed)
    inc = EdgeFaceIncidence.from_mesh(mesh)
    base = emnn_layer(state, inc, params)
    q = random_orthogonal(rng, det=1.0)
    t = rng.normal(size=3)
    moved = emnn_layer(transform_state(state, q, t), inc, params)
    assert np.max(np.abs(moved.h.data - base.h.data)) < 1e-9
    expected = transform_state(base, q, t)
    assert np.max(np.abs(moved.X.data - expected.X.data)) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_layer_reflection_needs_winding_swap(seed):
    rng = np.random.default_rng(seed + 40)
    mesh = shapes.tetrahedron()
    state = make_state(mesh, channels=1, seed=seed)
    params = make_params(seed=seed)
    base = emnn_layer(state, EdgeFaceIncidence.from_mesh(mesh), params)
    q = random_orthogonal(rng, det=-1.0)
    reflected = transform_state(state, q, np.zeros(3))
    expected = transform_state(base, q, np.zeros(3))

    swapped_inc = EdgeFaceIncidence.from_mesh(mesh.with_reversed_winding())
    good = emnn_layer(reflected, swapped_inc, params)
    assert np.max(np.abs(good.h.data - base.h.data)) < 1e-9
    assert np.max(np.abs(good.X.data - expected.X.data)) < 1e-9

    bad = emnn_layer(reflected, EdgeFaceIncidence.from_mesh(mesh), params)
    assert np.max(np.abs(bad.X.data - expected.X.data)) > 1e-3


def test_layer_permutation_equivariance():
    # relabel-then-sort reshuffles within-segment summation order, so the
    # match is to rounding noise rather than bitwise
    mesh = shapes.icosphere(1)
    state = make_state(mesh, channels=2, seed=0)
    params = make_params(channels=2)
    base = emnn_layer(state, EdgeFaceIncidence.from_mesh(mesh), params)
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(mesh.num_vertices)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        pstate = NodeState(ad.tensor(state.h.data[inverse]),
                           ad.tensor(state.X.data[inverse]))
        out = emnn_layer(pstate, EdgeFaceIncidence.from_mesh(mesh.permuted(perm)),
                         params)
        assert np.max(np.abs(out.h.data[perm] - base.h.data)) < 1e-12
        assert np.max(np.abs(out.X.data[perm] - base.X.data)) < 1e-12


def test_stacked_layers_gradient_matches_fd():
    # octahedron: six vertices, eight faces
    positions = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1],
                 [0, 0, -1]]
    faces = [[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
             [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]]
    from emnn.mesh import Mesh
    mesh = Mesh(positions, faces)
    inc = EdgeFaceIncidence.from_mesh(mesh)
    params = make_params(channels=1, seed=9)
    rng = np.random.default_rng(9)
    h0 = ad.tensor(rng.normal(size=(6, D_H)))
    x = ad.parameter(np.array(mesh.positions)[:, :, None])

    def f(x_in):
        state = NodeState(h0, x_in)
        for _ in range(3):
            state = emnn_layer(state, inc, params)
        return ad.sum(ad.mul(state.h, 0.01))

    assert ad.finite_difference_check(f, x, step=1e-6) < 1e-4
