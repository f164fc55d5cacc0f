"""Multi-resolution pooling over farthest-point-sampled centroids.

Each hierarchy level selects centroids from its parent level by greedy
farthest point sampling, pools invariant features by an elementwise max
over radius neighborhoods, and (for unpooling) interpolates child features
back to the parent vertices as an inverse-distance weighted average over
the K nearest centroids, concatenated with the parent's skip features.

Only the invariant features travel through the hierarchy; the selection
itself depends on pairwise distances only, so it is unchanged under any
rigid motion or reflection of the vertex positions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

COINCIDENT_EPS = 1e-12


FPS_TIE_RTOL = 1e-9


def fps(points, count, start=0):
    """Greedy max-min farthest point sampling.

    The first pick is ``start``; every subsequent pick maximizes the
    minimum (squared) distance to the picks so far, ties broken by the
    lowest index. Candidates within a relative FPS_TIE_RTOL of the best
    count as tied, so the selection on symmetric point sets does not flip
    with the rounding noise of a rotated coordinate frame. Deterministic
    given ``start``.
    """
    points = np.asarray(points, dtype=np.float64)
    k = points.shape[0]
    if count > k:
        warnings.warn(f"fps: requested {count} of {k} points; clamping", stacklevel=2)
        count = k
    if count < 1:
        raise ValueError("fps: count must be >= 1")
    selected = np.empty(count, dtype=np.int64)
    selected[0] = start
    min_d2 = np.full(k, np.inf)
    last = start
    for t in range(1, count):
        delta = points - points[last]
        min_d2 = np.minimum(min_d2, np.einsum("ij,ij->i", delta, delta))
        min_d2[last] = -1.0  # never re-pick
        best = float(np.max(min_d2))
        last = int(np.argmax(min_d2 >= best - FPS_TIE_RTOL * abs(best)))
        selected[t] = last
    return selected


def radius_neighbors(points, centroid_indices, radius, chunk=256):
    """Indices of all points within ``radius`` (inclusive) of each centroid.

    Every neighborhood contains its own centroid. The boundary test allows
    a relative fp-tolerance so that points lying exactly on the sphere
    (common on regular grids) keep their membership in a rotated frame.
    Returns a list of sorted index arrays, one per centroid.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    points = np.asarray(points, dtype=np.float64)
    centroid_indices = np.asarray(centroid_indices, dtype=np.int64)
    out = []
    r2 = radius * radius * (1.0 + 1e-9)
    for lo in range(0, centroid_indices.size, chunk):
        block = points[centroid_indices[lo:lo + chunk]]
        d2 = np.sum((block[:, None, :] - points[None, :, :]) ** 2, axis=2)
        for row in d2:
            out.append(np.nonzero(row <= r2)[0].astype(np.int64))
    return out


def mean_nn_distance(points, chunk=512):
    """Mean distance from each point to its nearest other point."""
    points = np.asarray(points, dtype=np.float64)
    k = points.shape[0]
    if k < 2:
        return 0.0
    nearest = np.empty(k)
    for lo in range(0, k, chunk):
        d2 = np.sum((points[lo:lo + chunk, None, :] - points[None, :, :]) ** 2, axis=2)
        rows = np.arange(lo, min(lo + chunk, k))
        d2[rows - lo, rows] = np.inf
        nearest[rows] = np.sqrt(d2.min(axis=1))
    return float(nearest.mean())


def _tie_stable_order(values, rtol=1e-9):
    """Ascending order of ``values`` with near-equal runs sorted by index.

    Plain argsort resolves exact ties by position, but values that are
    equal only up to rounding (symmetric geometry seen from a rotated
    frame) would come out in a frame-dependent order. Grouping within a
    relative tolerance and ordering each group by index pins the result.
    """
    order = np.argsort(values, kind="stable")
    ranked = values[order]
    gaps = np.diff(ranked) > rtol * (ranked[1:] + 1e-12)
    boundaries = np.concatenate([[0], np.nonzero(gaps)[0] + 1, [order.size]])
    for lo, hi in zip(boundaries[:-1], boundaries[1:]):
        if hi - lo > 1:
            order[lo:hi] = np.sort(order[lo:hi])
    return order


def knn_to_centroids(points, centroid_positions, k):
    """For each point, the ``min(k, #centroids)`` nearest centroids.

    Returns (indices, distances), both (n, K), sorted ascending by
    distance with ties broken by the lower centroid index.
    """
    points = np.asarray(points, dtype=np.float64)
    centroid_positions = np.asarray(centroid_positions, dtype=np.float64)
    k = min(k, centroid_positions.shape[0])
    d2 = np.sum((points[:, None, :] - centroid_positions[None, :, :]) ** 2, axis=2)
    order = np.stack([_tie_stable_order(row)[:k] for row in d2])
    dists = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return order.astype(np.int64), dists


@dataclass(frozen=True)
class HierarchyLevel:
    """One coarsening step: parent vertices -> FPS centroids."""

    level: int
    centroids: np.ndarray       # (m,) indices into the parent level
    positions: np.ndarray       # (m, 3) centroid positions
    radius: float
    neighbor_vertex: np.ndarray   # flat parent indices of all neighborhoods
    neighbor_segment: np.ndarray  # centroid slot of each flat entry
    knn_indices: np.ndarray     # (n_parent, K) centroid slots
    knn_weights: np.ndarray     # (n_parent, K) convex interpolation weights

    @property
    def num_centroids(self):
        return self.centroids.shape[0]


def unpool_weights(distances, eps=COINCIDENT_EPS):
    """Inverse-distance weights, floored at ``eps`` then renormalized.

    Nonnegative and summing to one per row; a coincident centroid
    (distance ~ 0) takes essentially all the weight.
    """
    raw = 1.0 / np.maximum(distances, eps)
    return raw / raw.sum(axis=1, keepdims=True)


def build_level(parent_points, count, *, level, radius=None, k=3, start=0,
                radius_scale=2.0):
    """Select ``count`` centroids from the parent level and precompute its
    pooling neighborhoods and unpooling KNN map."""
    parent_points = np.asarray(parent_points, dtype=np.float64)
    if radius is None:
        radius = radius_scale * mean_nn_distance(parent_points)
        if radius <= 0:
            radius = 1.0
    centroids = fps(parent_points, count, start=start)
    positions = parent_points[centroids]
    hoods = radius_neighbors(parent_points, centroids, radius)
    neighbor_vertex = np.concatenate(hoods) if hoods else np.zeros(0, dtype=np.int64)
    neighbor_segment = np.repeat(np.arange(len(hoods), dtype=np.int64),
                                 [len(h) for h in hoods])
    knn_idx, knn_dist = knn_to_centroids(parent_points, positions, k)
    return HierarchyLevel(level, centroids, positions, float(radius),
                          neighbor_vertex, neighbor_segment,
                          knn_idx, unpool_weights(knn_dist))


def build_hierarchy(points, depth, *, ratios=None, radii=None, k=3, start=0,
                    radius_scale=2.0):
    """Coarsening cascade: ``depth`` levels total, so ``depth - 1`` steps.

    Level l keeps ceil(ratio_l * |level l-1|) centroids. Depth 1 is the
    identity hierarchy (no pooling).
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    steps = depth - 1
    if ratios is None:
        ratios = [0.25] * steps
    if radii is None:
        radii = [None] * steps
    if len(ratios) != steps or len(radii) != steps:
        raise ValueError(f"need {steps} ratios and radii for depth {depth}")
    levels = []
    current = np.asarray(points, dtype=np.float64)
    for l, (ratio, radius) in enumerate(zip(ratios, radii), start=1):
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"ratio must be in (0, 1], got {ratio}")
        count = int(np.ceil(ratio * current.shape[0]))
        if count < 1:
            raise ValueError(f"hierarchy level {l} collapsed to zero vertices")
        lvl = build_level(current, count, level=l, radius=radius, k=k,
                          start=start, radius_scale=radius_scale)
        levels.append(lvl)
        current = lvl.positions
    return levels


def pool(h_parent, level, phi_pool):
    """Neighborhood max of transformed parent features.

    h_child[i] = max over j in the radius neighborhood of centroid i of
    phi_pool(h_parent[j]); gradient flows to the argmax entries only.
    """
    transformed = phi_pool(h_parent)
    gathered = ad.gather(transformed, level.neighbor_vertex)
    return ad.segment_max(gathered, level.neighbor_segment, level.num_centroids)


def unpool(h_child, h_skip, level, phi_unpool):
    """Distance-weighted KNN interpolation back to the parent vertices,
    concatenated with the parent's skip features and mixed by ``phi_unpool``."""
    n_parent, k = level.knn_indices.shape
    gathered = ad.gather(h_child, level.knn_indices.ravel())
    weighted = ad.mul(gathered, level.knn_weights.reshape(-1, 1))
    parent_ids = np.repeat(np.arange(n_parent, dtype=np.int64), k)
    interpolated = ad.segment_sum(weighted, parent_ids, n_parent)
    return phi_unpool(ad.concat([interpolated, h_skip]))
