"""Degree-of-freedom management, interpolation and quadrature.

Two lowest-order spaces are handled on a shared :class:`~plapminres.mesh.Mesh`:

* ``P1`` -- continuous piecewise linears, one DOF per vertex, boundary
  vertices carry prescribed Dirichlet values;
* ``CR`` -- Crouzeix-Raviart piecewise linears, one DOF per edge (the value
  at the edge midpoint), continuous only at interior edge midpoints and
  pinned to zero on boundary edges.

Coefficient vectors are always "full" (one entry per DOF, constrained
entries included); :class:`DofMap` converts between full vectors and the
free subvector seen by solvers.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Mapping

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

from .mesh import Mesh, signed_areas

P1 = "P1"
CR = "CR"


class SpaceError(ValueError):
    """Raised for invalid space construction or queries."""


# ---------------------------------------------------------------------------
# quadrature on the reference triangle {x, y >= 0, x + y <= 1}


@dataclass(frozen=True, eq=False)
class QuadRule:
    """Quadrature rule in barycentric coordinates on the reference triangle.

    ``points`` has shape (nq, 3) and ``weights`` sums to the reference area
    1/2; all points are strictly interior.  ``degree`` is the total
    polynomial degree integrated exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def physical_points(self, tri_coords: np.ndarray) -> np.ndarray:
        """Map to physical coordinates; tri_coords is (nt, 3, 2) or (3, 2)."""
        return np.einsum("qk,...kd->...qd", self.points, tri_coords)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadRule:
    """Interior-point rule exact for polynomials of the given total degree.

    Degrees up to 2 use the classical symmetric 3-point rule; higher
    degrees use a conical-product Gauss rule (Gauss-Legendre crossed with
    Gauss-Jacobi weighted by the collapsed-coordinate Jacobian), which has
    positive weights and strictly interior points for every order.
    """
    if degree < 1:
        raise SpaceError("quadrature degree must be >= 1")
    if degree <= 2:
        points = np.array([
            [2 / 3, 1 / 6, 1 / 6],
            [1 / 6, 2 / 3, 1 / 6],
            [1 / 6, 1 / 6, 2 / 3],
        ])
        weights = np.full(3, 1 / 6)
        return QuadRule(points, weights, 2)

    n = degree // 2 + 1  # conical product is exact up to 2n - 1
    xg, wg = leggauss(n)
    xi = 0.5 * (xg + 1.0)
    wxi = 0.5 * wg
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    eta = 0.5 * (xj + 1.0)
    weta = 0.25 * wj

    x = (xi[None, :] * (1.0 - eta[:, None])).ravel()
    y = np.repeat(eta, n)
    w = (weta[:, None] * wxi[None, :]).ravel()
    points = np.column_stack([1.0 - x - y, x, y])
    for arr in (points, w):
        arr.setflags(write=False)
    return QuadRule(points, w, 2 * n - 1)


# ---------------------------------------------------------------------------
# element geometry


@dataclass(frozen=True, eq=False)
class ElementGeometry:
    """Per-element affine data shared by every assembly routine.

    ``grad_p1[t, i]`` is the (constant) gradient of the P1 hat function of
    local vertex ``i`` on triangle ``t``; the CR basis function attached to
    the edge opposite vertex ``i`` is ``1 - 2*lambda_i``, so its gradient
    is ``-2 * grad_p1[t, i]``.
    """

    areas: np.ndarray       # (nt,)
    grad_p1: np.ndarray     # (nt, 3, 2)
    grad_cr: np.ndarray     # (nt, 3, 2)
    tri_coords: np.ndarray  # (nt, 3, 2)

    @classmethod
    def from_mesh(cls, m: Mesh) -> "ElementGeometry":
        coords = m.vertices[m.triangles]
        areas = signed_areas(m.vertices, m.triangles)
        # grad(lambda_i) = rot90(x_{i+2} - x_{i+1}) / (2 area)
        e = np.stack([coords[:, 2] - coords[:, 1],
                      coords[:, 0] - coords[:, 2],
                      coords[:, 1] - coords[:, 0]], axis=1)
        rot = np.empty_like(e)
        rot[..., 0] = -e[..., 1]
        rot[..., 1] = e[..., 0]
        grad_p1 = rot / (2.0 * areas)[:, None, None]
        grad_cr = -2.0 * grad_p1
        for arr in (areas, grad_p1, grad_cr):
            arr.setflags(write=False)
        return cls(areas, grad_p1, grad_cr, coords)


# ---------------------------------------------------------------------------
# DOF maps


@dataclass(frozen=True, eq=False)
class DofMap:
    """Enumeration of free and constrained DOFs of one space on one mesh.

    ``constrained_values`` has length ``n_total`` and is zero on free DOFs;
    for the P1 trial space it carries the Dirichlet data, for the CR test
    space it is identically zero.
    """

    kind: str
    mesh: Mesh
    n_total: int
    free_dofs: np.ndarray
    constrained_dofs: np.ndarray
    constrained_values: np.ndarray
    _free_index: np.ndarray  # full index -> position in free vector, -1 if constrained

    @property
    def n_free(self) -> int:
        return self.free_dofs.shape[0]

    def full_from_free(self, free_values: np.ndarray) -> np.ndarray:
        """Expand a free-DOF vector into a full coefficient vector."""
        full = self.constrained_values.copy()
        full[self.free_dofs] = free_values
        return full

    def free_part(self, full_values: np.ndarray) -> np.ndarray:
        return np.asarray(full_values)[self.free_dofs]

    def zero_full(self) -> np.ndarray:
        """Full vector with zero free values and the constrained data."""
        return self.constrained_values.copy()


def build_space(m: Mesh, kind: str,
                boundary_values: Mapping[int, float] | Callable | None = None
                ) -> DofMap:
    """Build the DOF map of a P1 or CR space on a mesh.

    Parameters
    ----------
    m : Mesh
    kind : {"P1", "CR"}
    boundary_values : optional
        Dirichlet data for the P1 space: either a mapping from boundary
        vertex index to value, or a callable ``g(x, y)`` evaluated at the
        boundary vertices.  Must be omitted for CR (whose boundary DOFs are
        hard zeros) and may be omitted for homogeneous P1 data.

    Raises
    ------
    SpaceError
        For an unknown kind, for boundary data handed to a CR space, or
        for a mapping that references a non-boundary vertex.
    """
    if kind == P1:
        n_total = m.n_vertices
        constrained = m.boundary_vertices()
        values = np.zeros(n_total)
        if callable(boundary_values):
            pts = m.vertices[constrained]
            values[constrained] = [boundary_values(x, y) for x, y in pts]
        elif boundary_values is not None:
            on_boundary = np.zeros(n_total, dtype=bool)
            on_boundary[constrained] = True
            for v, g in boundary_values.items():
                if not on_boundary[v]:
                    raise SpaceError(f"vertex {v} is not on the boundary")
                values[v] = g
    elif kind == CR:
        if boundary_values is not None:
            raise SpaceError("CR test space has hard-zero boundary DOFs")
        n_total = m.n_edges
        constrained = np.nonzero(m.boundary_edge_flags)[0]
        values = np.zeros(n_total)
    else:
        raise SpaceError(f"unknown space kind {kind!r}")

    mask = np.ones(n_total, dtype=bool)
    mask[constrained] = False
    free = np.nonzero(mask)[0]
    free_index = np.full(n_total, -1, dtype=np.int64)
    free_index[free] = np.arange(free.size)
    for arr in (free, constrained, values, free_index):
        arr.setflags(write=False)
    return DofMap(kind, m, n_total, free, constrained, values, free_index)


def element_dofs(dm: DofMap) -> np.ndarray:
    """Global DOF indices of the three local basis functions, shape (nt, 3).

    Local slot ``i`` holds the vertex ``i`` hat function for P1 and the
    midpoint function of the edge opposite vertex ``i`` for CR, matching
    the gradient layout of :class:`ElementGeometry`.
    """
    if dm.kind == P1:
        return dm.mesh.triangles
    return dm.mesh.triangle_edges


def element_gradient(dm: DofMap, coeffs: np.ndarray, t: int) -> np.ndarray:
    """Constant gradient of the piecewise-linear function on triangle ``t``."""
    if not 0 <= t < dm.mesh.n_triangles:
        raise SpaceError(f"triangle index {t} out of range")
    return all_element_gradients(dm, coeffs)[t]


def all_element_gradients(dm: DofMap, coeffs: np.ndarray) -> np.ndarray:
    """Gradients of the discrete function on every triangle, shape (nt, 2)."""
    geo = geometry_of(dm.mesh)
    local = np.asarray(coeffs)[element_dofs(dm)]
    basis = geo.grad_p1 if dm.kind == P1 else geo.grad_cr
    return np.einsum("ti,tid->td", local, basis)


_GEOMETRY_CACHE: "weakref.WeakKeyDictionary[Mesh, ElementGeometry]" = weakref.WeakKeyDictionary()


def geometry_of(m: Mesh) -> ElementGeometry:
    """Memoized :class:`ElementGeometry` of a mesh."""
    geo = _GEOMETRY_CACHE.get(m)
    if geo is None:
        geo = ElementGeometry.from_mesh(m)
        _GEOMETRY_CACHE[m] = geo
    return geo


def broken_seminorm(dm: DofMap, coeffs: np.ndarray, p: float) -> float:
    """Broken W^{1,p} seminorm with componentwise gradient powers.

    Returns ``(sum_T area_T * (|g_T1|^p + |g_T2|^p))^{1/p}`` where ``g_T``
    is the constant gradient on triangle ``T``; exact for piecewise
    linears.
    """
    if p <= 1.0:
        raise SpaceError("broken seminorm requires p > 1")
    geo = geometry_of(dm.mesh)
    g = all_element_gradients(dm, coeffs)
    mass = geo.areas @ (np.abs(g) ** p).sum(axis=1)
    return float(mass ** (1.0 / p))


def cr_interpolate(m: Mesh, edge_mean_evaluator: Callable) -> np.ndarray:
    """Crouzeix-Raviart interpolation from edge means.

    ``edge_mean_evaluator(a, b)`` must return the mean of the target
    function over the segment with endpoint coordinates ``a`` and ``b``.
    The returned full CR coefficient vector reproduces those edge means
    (the midpoint value of a linear function equals its edge mean), and as
    a consequence preserves the mean gradient of the target on every
    element.
    """
    ev = m.vertices[m.edges]
    return np.array([edge_mean_evaluator(a, b) for a, b in ev])


def gauss_edge_mean(f: Callable, n_points: int = 6) -> Callable:
    """Edge-mean evaluator for a pointwise function via Gauss-Legendre."""
    xg, wg = leggauss(n_points)
    s = 0.5 * (xg + 1.0)
    w = 0.5 * wg

    def mean(a, b):
        pts = a[None, :] + s[:, None] * (b - a)[None, :]
        return float(w @ np.array([f(x, y) for x, y in pts]))

    return mean


def embed_p1_in_cr(m: Mesh, p1_coeffs: np.ndarray) -> np.ndarray:
    """CR coefficients of a P1 function (edge midpoint = mean of endpoints).

    The embedded function is pointwise identical to the P1 original, so
    its element gradients agree exactly.
    """
    p1_coeffs = np.asarray(p1_coeffs)
    return 0.5 * (p1_coeffs[m.edges[:, 0]] + p1_coeffs[m.edges[:, 1]])


def p1_interpolate(m: Mesh, f: Callable) -> np.ndarray:
    """Vertex interpolant of a pointwise function ``f(x, y)``."""
    return np.array([f(x, y) for x, y in m.vertices])
