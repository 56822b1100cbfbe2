"""Quadrature rules on simplices and on pairs of surface panels.

Simplex rules are conical (collapsed) Gauss-Jacobi products. Panel-pair rules
for touching triangles use the relative-coordinate splits of Sauter and
Schwab on the reference triangle {0 <= r2 <= r1 <= 1}; all pair rules are
returned as barycentric coordinates so callers can evaluate bases directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MAX_VOLUME_DEGREE = 14
PAIR_CLASSES = ("far", "vertex", "edge", "identical")


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    """Points in reference coordinates (last axis) and matching weights."""

    points: np.ndarray
    weights: np.ndarray

    @property
    def size(self):
        return len(self.weights)

    def barycentric(self):
        return np.column_stack([1.0 - self.points.sum(axis=1), self.points])


@lru_cache(maxsize=None)
def gauss_legendre(n):
    """n-point Gauss rule on [0, 1]."""
    x, w = roots_legendre(n)
    return (x + 1.0) / 2.0, w / 2.0


@lru_cache(maxsize=None)
def _gauss_jacobi01(n, alpha):
    x, w = roots_jacobi(n, alpha, 0)
    # weight (1 - t)^alpha on [0, 1]
    return (x + 1.0) / 2.0, w / 2.0 ** (alpha + 1)


def _points_for(degree):
    return max(1, math.ceil((degree + 1) / 2))


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Rule on the triangle (0,0),(1,0),(0,1), exact for total degree ``degree``; weights sum to 1/2."""
    if degree < 0:
        raise QuadratureError(f"negative degree {degree}")
    n = _points_for(degree)
    s, ws = gauss_legendre(n)
    t, wt = _gauss_jacobi01(n, 1)
    tt, ss = np.meshgrid(t, s, indexing="ij")
    points = np.column_stack([tt.ravel(), ((1.0 - tt) * ss).ravel()])
    weights = np.outer(wt, ws).ravel()
    return QuadratureRule(points, weights)


@lru_cache(maxsize=None)
def volume_quadrature(p_exactness):
    """Rule on the reference tet exact for total degree ``p_exactness``; weights sum to 1/6."""
    if p_exactness < 0 or p_exactness > MAX_VOLUME_DEGREE:
        raise QuadratureError(f"unsupported volume quadrature degree {p_exactness} (max {MAX_VOLUME_DEGREE})")
    if p_exactness <= 1:
        return QuadratureRule(np.full((1, 3), 0.25), np.array([1.0 / 6.0]))
    n = _points_for(p_exactness)
    r, wr = _gauss_jacobi01(n, 2)
    s, ws = _gauss_jacobi01(n, 1)
    t, wt = gauss_legendre(n)
    rr, ss, tt = np.meshgrid(r, s, t, indexing="ij")
    x = rr
    y = (1.0 - rr) * ss
    z = (1.0 - rr) * (1.0 - ss) * tt
    points = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    weights = np.einsum("i,j,k->ijk", wr, ws, wt).ravel()
    return QuadratureRule(points, weights)


def simplex_monomial_integral(exponents):
    """Exact integral of prod x_i^a_i over the reference simplex of matching dimension."""
    exponents = [int(a) for a in exponents]
    d = len(exponents)
    return math.prod(math.factorial(a) for a in exponents) / math.factorial(sum(exponents) + d)


@dataclass(frozen=True)
class PairRule:
    """Quadrature on a panel pair: barycentric points on each panel, weights for unit Jacobians.

    Physical integral = sum(weights * f(x, y)) * (2 |a|) * (2 |b|).
    """

    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray

    @property
    def size(self):
        return len(self.weights)


def _reference_bary(r1, r2):
    return np.column_stack([1.0 - r1, r1 - r2, r2])


def _cube(order):
    g, w = gauss_legendre(order)
    grids = np.meshgrid(g, g, g, g, indexing="ij")
    weights = np.einsum("i,j,k,l->ijkl", w, w, w, w).ravel()
    return [a.ravel() for a in grids], weights


def _identical_regions(xi, e1, e2, e3):
    regions = [
        ((xi, xi * (1 - e1 + e1 * e2)), (xi * (1 - e1 * e2 * e3), xi * (1 - e1))),
        ((xi, xi * e1 * (1 - e2 + e2 * e3)), (xi * (1 - e1 * e2), xi * e1 * (1 - e2))),
        ((xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), (xi, xi * e1 * (1 - e2))),
    ]
    jac = xi ** 3 * e1 ** 2 * e2
    out = []
    for x, y in regions:
        out.append((x, y, jac))
        out.append((y, x, jac))
    return out


def _edge_regions(xi, e1, e2, e3):
    jac = xi ** 3 * e1 ** 2 * e2
    return [
        ((xi, xi * e1 * e3), (xi * (1 - e1 * e2), xi * e1 * (1 - e2)), xi ** 3 * e1 ** 2),
        ((xi, xi * e1), (xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3)), jac),
        ((xi * (1 - e1 * e2), xi * e1 * (1 - e2)), (xi, xi * e1 * e2 * e3), jac),
        ((xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3)), (xi, xi * e1), jac),
        ((xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), (xi, xi * e1 * e2), jac),
    ]


def _vertex_regions(xi, e1, e2, e3):
    jac = xi ** 3 * e2
    return [
        ((xi, xi * e1), (xi * e2, xi * e2 * e3), jac),
        ((xi * e2, xi * e2 * e3), (xi, xi * e1), jac),
    ]


@lru_cache(maxsize=None)
def panel_quadrature(pair_class, order):
    """Pair rule for panels sharing 0 (far), 1, 2 or 3 vertices.

    For touching classes the shared vertices must come first in both panels,
    and for ``edge`` the shared edge runs from vertex 0 to vertex 1 in both.
    ``order`` is the Gauss count per direction (per collapsed direction for far).
    """
    if order < 1:
        raise QuadratureError(f"quadrature order must be positive, got {order}")
    if pair_class == "far":
        tri = triangle_rule(2 * order - 1)
        n = tri.size
        bary = tri.barycentric()
        x = np.repeat(bary, n, axis=0)
        y = np.tile(bary, (n, 1))
        weights = np.outer(tri.weights, tri.weights).ravel()
        return PairRule(x, y, weights)
    splitters = {"identical": _identical_regions, "edge": _edge_regions, "vertex": _vertex_regions}
    if pair_class not in splitters:
        raise QuadratureError(f"unsupported panel pair class '{pair_class}'")
    (xi, e1, e2, e3), w = _cube(order)
    xs, ys, ws = [], [], []
    for (x1, x2), (y1, y2), jac in splitters[pair_class](xi, e1, e2, e3):
        xs.append(_reference_bary(x1, x2))
        ys.append(_reference_bary(y1, y2))
        ws.append(w * jac)
    return PairRule(np.vstack(xs), np.vstack(ys), np.concatenate(ws))


def pair_class_of(shared):
    """Pair class from the number of shared vertices."""
    try:
        return PAIR_CLASSES[int(shared)]
    except (IndexError, ValueError):
        raise QuadratureError(f"panels cannot share {shared} vertices")

