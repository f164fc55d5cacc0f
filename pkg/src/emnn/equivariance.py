"""Numerical verification of the model's symmetry properties.

For a given mesh and model the harness draws random rigid motions,
reflections, vertex permutations, and scalings, and measures how far the
network output moves from the transform-commuted baseline:

(a) invariant features and logits under proper motions,
(b) covariance of the vector channels,
(c) reflection combined with a winding reversal of every face,
(d) reflection WITHOUT the winding reversal - the face pathway is expected
    to violate this one; the measured deviation is the detected asymmetry,
(e) vertex relabeling,
(f) uniform scaling (absorbed by the normalizer).

Positions are centered and rescaled inside the forward pass, so drawn
translations and scales are cancelled before the layer stack; they are
still applied to the input to exercise exactly that cancellation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh
from .model import forward_pass

PROPER_CHECKS = ("h_invariance", "x_covariance", "reflection_equivariance",
                 "permutation", "scale_invariance")


def random_orthogonal(rng, det=1.0):
    """Random orthogonal matrix via QR of a Gaussian sample, with the
    column signs fixed for uniformity and the determinant forced to
    ``det`` (+1 rotation, -1 reflection)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) * det < 0:
        q[:, 0] = -q[:, 0]
    return q


def _rotate_channels(x, q):
    return np.einsum("ab,nbc->nac", q, x)


def _max_abs(a, b):
    return float(np.max(np.abs(a - b))) if a.size else 0.0


@dataclass
class EquivarianceReport:
    """Max deviation per check over all trials, plus the pass verdict."""

    deviations: dict
    tolerance: float
    trials: int
    face_pathway_active: bool

    @property
    def failing_checks(self):
        failing = [name for name in PROPER_CHECKS
                   if self.deviations[name] > self.tolerance]
        if self.face_pathway_active and \
                self.deviations["reflection_asymmetry"] <= self.tolerance:
            failing.append("reflection_asymmetry")
        return failing

    @property
    def passed(self):
        return not self.failing_checks

    def lines(self):
        rows = []
        for name in PROPER_CHECKS:
            dev = self.deviations[name]
            status = "ok" if dev <= self.tolerance else "FAIL"
            rows.append(f"  {name:<26s} max dev {dev:.3e}  [{status}]")
        dev = self.deviations["reflection_asymmetry"]
        if self.face_pathway_active:
            status = "ok" if dev > self.tolerance else "FAIL"
            rows.append(f"  {'reflection_asymmetry':<26s} max dev {dev:.3e}  "
                        f"[{status}] (must exceed tolerance)")
        else:
            rows.append(f"  {'reflection_asymmetry':<26s} max dev {dev:.3e}  "
                        "[n/a] (face pathway inactive)")
        return rows


def _compare(base, other, expected_q=None):
    """(h deviation, X deviation, logit deviation) between two passes."""
    x_expected = base.X.data if expected_q is None \
        else _rotate_channels(base.X.data, expected_q)
    return (_max_abs(other.h.data, base.h.data),
            _max_abs(other.X.data, x_expected),
            _max_abs(other.logits.data, base.logits.data))


def measure_rigid(mesh, config, params, q, t, base=None, swap_winding=False):
    """Deviations after x -> Qx + t (optionally with winding reversal)."""
    if base is None:
        base = forward_pass(mesh, config, params)
    moved = Mesh(mesh.positions @ q.T + t, mesh.faces, mesh.vertex_scalars)
    if swap_winding:
        moved = moved.with_reversed_winding()
    return _compare(base, forward_pass(moved, config, params), expected_q=q)


def measure_permutation(mesh, config, params, perm, base=None):
    """Deviations after relabeling vertex i as perm[i]."""
    if base is None:
        base = forward_pass(mesh, config, params)
    out = forward_pass(mesh.permuted(perm), config, params)
    h_dev = _max_abs(out.h.data[perm], base.h.data)
    x_dev = _max_abs(out.X.data[perm], base.X.data)
    if config.task == "segmentation":
        logit_dev = _max_abs(out.logits.data[perm], base.logits.data)
    else:
        logit_dev = _max_abs(out.logits.data, base.logits.data)
    return h_dev, x_dev, logit_dev


def measure_scale(mesh, config, params, alpha, t, base=None):
    """Deviations after x -> alpha * x + t (absorbed by normalization)."""
    if base is None:
        base = forward_pass(mesh, config, params)
    scaled = Mesh(mesh.positions * alpha + t, mesh.faces, mesh.vertex_scalars)
    return _compare(base, forward_pass(scaled, config, params))


def run_equivariance_checks(mesh, config, params, trials=20, tolerance=1e-7,
                            seed=0):
    """Run all checks for ``trials`` random draws and report max deviations.

    The pass rule: (a), (b), (c), (e), (f) must stay within tolerance and,
    while the face pathway is active, the no-swap reflection deviation (d)
    must exceed it. Hierarchical centroid selection is seeded by vertex
    index, so the permutation check covers the layer-stack features (and
    logits only when no pooling runs).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    base = forward_pass(mesh, config, params)
    face_active = (not config.egnn_only) and mesh.num_faces > 0
    dev = {name: 0.0 for name in PROPER_CHECKS}
    dev["reflection_asymmetry"] = 0.0
    n = mesh.num_vertices

    for _ in range(trials):
        t = rng.normal(0.0, 1.0, size=3)
        q = random_orthogonal(rng, det=1.0)
        h_d, x_d, l_d = measure_rigid(mesh, config, params, q, t, base=base)
        dev["h_invariance"] = max(dev["h_invariance"], h_d, l_d)
        dev["x_covariance"] = max(dev["x_covariance"], x_d)

        q_ref = random_orthogonal(rng, det=-1.0)
        h_d, x_d, l_d = measure_rigid(mesh, config, params, q_ref, t, base=base,
                                      swap_winding=True)
        dev["reflection_equivariance"] = max(dev["reflection_equivariance"],
                                             h_d, x_d, l_d)
        h_d, x_d, l_d = measure_rigid(mesh, config, params, q_ref, t, base=base,
                                      swap_winding=False)
        dev["reflection_asymmetry"] = max(dev["reflection_asymmetry"],
                                          h_d, x_d, l_d)

        perm = rng.permutation(n)
        h_d, x_d, l_d = measure_permutation(mesh, config, params, perm, base=base)
        if config.pooling_steps:
            l_d = 0.0  # centroid selection is index-seeded; see docstring
        dev["permutation"] = max(dev["permutation"], h_d, x_d, l_d)

        alpha = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
        h_d, x_d, l_d = measure_scale(mesh, config, params, alpha, t, base=base)
        dev["scale_invariance"] = max(dev["scale_invariance"], h_d, x_d, l_d)

    return EquivarianceReport(dev, tolerance, trials, face_active)
