"""Nonlinear forms of the broken residual-minimization formulation.

With a P1 trial space and a CR test space on a common mesh, all discrete
functions have piecewise-constant gradients, so the p-Laplacian action

    <N(u), v> = sum_T int_T |grad u|^(p-2) grad u . grad v

and the duality-map action (the gradient of (1/p) * ||.||^p for the broken
seminorm with componentwise gradient powers)

    <D(r), v> = sum_T int_T sum_k |d_k r|^(p-2) (d_k r) (d_k v)

are integrated exactly element by element.  Note the deliberate asymmetry:
the operator weight uses the Euclidean gradient norm, the duality map is
the exact gradient of the implemented broken norm, which makes the pairing
identity <D(r), r> = ||r||^p hold to round-off.

Jacobian assembly regularizes the degenerate weights with a small epsilon
so Newton matrices stay finite for 1 < p < 2; the residual evaluations are
never regularized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .spaces import (
    CR,
    P1,
    DofMap,
    QuadRule,
    all_element_gradients,
    broken_seminorm,
    element_dofs,
    geometry_of,
)

EPS_FLOOR = 1e-10


class FormsError(ValueError):
    """Raised for inconsistent form setup."""


@dataclass(frozen=True, eq=False)
class LoadSpec:
    """Right-hand side description.

    ``radial_singular`` is the benchmark source f(x) = |x - x0|^(-sigma)
    with sigma < 2 so that f stays locally integrable in 2D; ``custom``
    wraps an arbitrary vectorized callable.
    """

    kind: str = "radial_singular"
    sigma: float = 0.97
    x0: tuple[float, float] = (-1.0, -1.0)
    func: Callable | None = None

    def __post_init__(self):
        if self.kind == "radial_singular":
            if not self.sigma < 2.0:
                raise FormsError("sigma must be < 2 for an integrable load")
        elif self.kind == "custom":
            if self.func is None:
                raise FormsError("custom load needs a callable")
        else:
            raise FormsError(f"unknown load kind {self.kind!r}")

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Evaluate the source on an (..., 2) array of points."""
        if self.kind == "custom":
            return self.func(points)
        diff = points - np.asarray(self.x0)
        r = np.sqrt((diff ** 2).sum(axis=-1))
        return r ** (-self.sigma)


@dataclass(frozen=True, eq=False)
class NonlinearForms:
    """Bundle of everything one nonlinear solve needs.

    ``load_free`` is the load functional tested against the free CR basis
    functions; it does not depend on the exponent, so it is assembled once
    per mesh and shared along a continuation path.
    """

    p: float
    trial: DofMap
    test: DofMap
    load_free: np.ndarray
    eps_floor: float = EPS_FLOOR  # Jacobian regularization scale, >= 0

    def __post_init__(self):
        if not self.p > 1.0:
            raise FormsError("exponent p must be > 1")
        if self.eps_floor < 0.0:
            raise FormsError("regularization floor must be nonnegative")
        if self.trial.kind != P1 or self.test.kind != CR:
            raise FormsError("trial space must be P1 and test space CR")
        if self.trial.mesh is not self.test.mesh:
            raise FormsError("trial and test spaces must share one mesh")
        if self.load_free.shape != (self.test.n_free,):
            raise FormsError("load vector does not match the free test DOFs")

    @property
    def p_dual(self) -> float:
        return self.p / (self.p - 1.0)

    @property
    def mesh(self):
        return self.trial.mesh


def _gather_free_test(forms: NonlinearForms, cell_values: np.ndarray) -> np.ndarray:
    """Accumulate (nt, 3) per-element test contributions into free DOFs."""
    dofs = element_dofs(forms.test)
    full = np.zeros(forms.test.n_total)
    np.add.at(full, dofs.ravel(), cell_values.ravel())
    return full[forms.test.free_dofs]


def apply_plaplacian(forms: NonlinearForms, u_coeffs: np.ndarray) -> np.ndarray:
    """Action of the broken p-Laplacian on u, tested with free CR functions.

    A zero element gradient contributes nothing for any p > 1 (the flux
    |g|^(p-2) g has magnitude |g|^(p-1) -> 0), so no regularization is
    needed here.
    """
    geo = geometry_of(forms.mesh)
    g = all_element_gradients(forms.trial, u_coeffs)
    s = np.linalg.norm(g, axis=1)
    w = np.zeros_like(s)
    nz = s > 0.0
    w[nz] = s[nz] ** (forms.p - 2.0)
    flux = geo.areas[:, None] * w[:, None] * g
    cells = np.einsum("td,tid->ti", flux, geo.grad_cr)
    return _gather_free_test(forms, cells)


def apply_duality_map(forms: NonlinearForms, r_coeffs: np.ndarray) -> np.ndarray:
    """Gradient of (1/p) * ||r||^p in the broken componentwise norm."""
    geo = geometry_of(forms.mesh)
    g = all_element_gradients(forms.test, r_coeffs)
    w = np.sign(g) * np.abs(g) ** (forms.p - 1.0)
    cells = np.einsum("t,td,tid->ti", geo.areas, w, geo.grad_cr)
    return _gather_free_test(forms, cells)


def _jacobian_epsilon(forms: NonlinearForms, dm: DofMap, coeffs: np.ndarray) -> float:
    """Regularization scale: tied to the current gradient magnitude."""
    scale = broken_seminorm(dm, coeffs, forms.p)
    return max(forms.eps_floor, forms.eps_floor * scale)


def _scatter_matrix(forms: NonlinearForms, blocks: np.ndarray,
                    row_dm: DofMap, col_dm: DofMap) -> sp.csr_matrix:
    """Scatter (nt, 3, 3) element blocks into a free x free CSR matrix."""
    rows_full = element_dofs(row_dm)
    cols_full = element_dofs(col_dm)
    nt = blocks.shape[0]
    rows = np.repeat(rows_full, 3, axis=1).ravel()
    cols = np.tile(cols_full, (1, 3)).ravel()
    data = blocks.reshape(nt, 9).ravel()

    ri = row_dm._free_index[rows]
    ci = col_dm._free_index[cols]
    keep = (ri >= 0) & (ci >= 0)
    mat = sp.coo_matrix((data[keep], (ri[keep], ci[keep])),
                        shape=(row_dm.n_free, col_dm.n_free))
    return mat.tocsr()


def assemble_operator_jacobian(forms: NonlinearForms,
                               u_coeffs: np.ndarray) -> sp.csr_matrix:
    """Derivative of the p-Laplacian action at u: free test x free trial.

    Entry (i, j) integrates
        mu_eps(g) * [grad(psi_j) . grad(phi_i)
                     + (p - 2) (g . grad(psi_j)) (g . grad(phi_i)) / (|g|^2 + eps^2)]
    with mu_eps(g) = (|g|^2 + eps^2)^((p-2)/2) and g the element gradient
    of u.  For eps = 0 and nonvanishing gradients this is the exact Gateaux
    derivative.
    """
    geo = geometry_of(forms.mesh)
    g = all_element_gradients(forms.trial, u_coeffs)
    eps = _jacobian_epsilon(forms, forms.trial, u_coeffs)
    s2 = (g ** 2).sum(axis=1) + eps ** 2
    mu = s2 ** ((forms.p - 2.0) / 2.0)

    gc = geo.grad_cr
    gp = geo.grad_p1
    base = np.einsum("tjd,tid->tij", gp, gc)
    du = np.einsum("td,tjd->tj", g, gp)
    dv = np.einsum("td,tid->ti", g, gc)
    rank1 = (forms.p - 2.0) * np.einsum("ti,tj->tij", dv, du) / s2[:, None, None]
    blocks = (geo.areas * mu)[:, None, None] * (base + rank1)
    return _scatter_matrix(forms, blocks, forms.test, forms.trial)


def assemble_duality_jacobian(forms: NonlinearForms,
                              r_coeffs: np.ndarray) -> sp.csr_matrix:
    """Hessian of (1/p)*||r||^p: symmetric free test x free test matrix.

    Componentwise weights (p-1) * (g_k^2 + eps^2)^((p-2)/2) make the matrix
    positive definite for eps > 0; the assembled matrix is symmetrized
    exactly.
    """
    geo = geometry_of(forms.mesh)
    g = all_element_gradients(forms.test, r_coeffs)
    eps = _jacobian_epsilon(forms, forms.test, r_coeffs)
    d = (forms.p - 1.0) * (g ** 2 + eps ** 2) ** ((forms.p - 2.0) / 2.0)
    gc = geo.grad_cr
    blocks = geo.areas[:, None, None] * np.einsum(
        "td,tid,tjd->tij", d, gc, gc)
    mat = _scatter_matrix(forms, blocks, forms.test, forms.test)
    return (mat + mat.T) * 0.5


def assemble_load(load: LoadSpec, test_dm: DofMap, quad: QuadRule) -> np.ndarray:
    """Load functional over the free CR test DOFs.

    Integrates f against the CR basis with the given rule; all quadrature
    points are strictly interior, so a singular radial load is never
    sampled at its center (asserted defensively).
    """
    mesh = test_dm.mesh
    geo = geometry_of(mesh)
    pts = quad.physical_points(geo.tri_coords)  # (nt, nq, 2)
    if load.kind == "radial_singular":
        dist = np.linalg.norm(pts - np.asarray(load.x0), axis=-1)
        if not np.all(dist > 0.0):
            raise FormsError("quadrature point coincides with the load center")
    fx = load(pts)
    phi = 1.0 - 2.0 * quad.points  # CR basis at the rule's barycentric points
    cells = 2.0 * geo.areas[:, None] * np.einsum(
        "q,tq,qi->ti", quad.weights, fx, phi)
    full = np.zeros(test_dm.n_total)
    np.add.at(full, element_dofs(test_dm).ravel(), cells.ravel())
    return full[test_dm.free_dofs]


def local_indicators(forms: NonlinearForms, r_coeffs: np.ndarray) -> np.ndarray:
    """Per-triangle masses m_T = |r|^p_{W^{1,p}(T)}; they sum to ||r||^p."""
    geo = geometry_of(forms.mesh)
    g = all_element_gradients(forms.test, r_coeffs)
    return geo.areas * (np.abs(g) ** forms.p).sum(axis=1)
