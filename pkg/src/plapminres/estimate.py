"""Error estimation, benchmarking against the radial exact solution,
Dörfler marking and convergence-rate extraction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .forms import NonlinearForms, local_indicators
from .spaces import DofMap, QuadRule, all_element_gradients, broken_seminorm, geometry_of


class EstimateError(ValueError):
    """Raised for invalid estimation queries."""


@dataclass(frozen=True, eq=False)
class ExactSolution:
    """Radially symmetric benchmark solution of the p-Laplacian.

    With r = |x - x0| and d = 2,

        u(x) = (p-1)/(p-sigma) * (1/(d-sigma))^(1/(p-1)) * (1 - r^q),
        q = (p - sigma)/(p - 1),

    which satisfies -div(|grad u|^(p-2) grad u) = r^(-sigma) and vanishes
    on the circle r = 1.  The gradient magnitude behaves like r^(q-1); for
    sigma > 1 it blows up at x0 and the evaluation refuses r = 0.
    """

    p: float
    sigma: float
    x0: tuple[float, float]
    d: int = 2

    def __post_init__(self):
        if not self.p > 1.0:
            raise EstimateError("p must be > 1")
        if not self.sigma < self.d:
            raise EstimateError("sigma must be < d for an integrable load")

    @property
    def radial_exponent(self) -> float:
        return (self.p - self.sigma) / (self.p - 1.0)

    @property
    def amplitude(self) -> float:
        return ((self.p - 1.0) / (self.p - self.sigma)
                * (1.0 / (self.d - self.sigma)) ** (1.0 / (self.p - 1.0)))

    def value(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        r = np.linalg.norm(points - np.asarray(self.x0), axis=-1)
        return self.amplitude * (1.0 - r ** self.radial_exponent)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        diff = points - np.asarray(self.x0)
        r = np.linalg.norm(diff, axis=-1)
        at_center = r == 0.0
        if np.any(at_center):
            # |grad u| ~ r^(q-1): the limit at the center is zero for q > 1
            # and unbounded (or direction-dependent) otherwise
            if self.radial_exponent <= 1.0:
                raise EstimateError("gradient is singular at the load center x0")
            r = np.where(at_center, 1.0, r)
        coeff = ((1.0 / (self.d - self.sigma)) ** (1.0 / (self.p - 1.0))
                 * r ** (self.radial_exponent - 2.0))
        return -coeff[..., None] * diff

    def source(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        r = np.linalg.norm(points - np.asarray(self.x0), axis=-1)
        return r ** (-self.sigma)

    def boundary_data(self):
        """Callable (x, y) -> u(x, y) for strong Dirichlet imposition."""
        return lambda x, y: float(self.value(np.array([x, y])))


def exact_eval(es: ExactSolution, x) -> tuple[float, np.ndarray]:
    """Value and gradient of the exact solution at one point."""
    x = np.asarray(x, dtype=float)
    return float(es.value(x)), es.gradient(x)


@dataclass
class StudyRecord:
    """One refinement level of a convergence study."""

    level: int
    n_free_trial: int
    n_free_test: int
    n_total: int
    h_max: float
    error: float
    eta: float
    eta_over_error: float
    eta_root_over_error: float
    newton_total: int
    damping_events: int
    wall_ms: float

    CSV_HEADER = ("level,n_free_trial,n_free_test,n_total,h_max,error,eta,"
                  "eta_over_error,eta_root_over_error,newton_total,"
                  "damping_events,wall_ms")

    def csv_row(self) -> str:
        return (f"{self.level},{self.n_free_trial},{self.n_free_test},"
                f"{self.n_total},{self.h_max:.17g},{self.error:.17g},"
                f"{self.eta:.17g},{self.eta_over_error:.17g},"
                f"{self.eta_root_over_error:.17g},{self.newton_total},"
                f"{self.damping_events},{self.wall_ms:.3f}")


def estimator_global(forms: NonlinearForms, r_coeffs: np.ndarray) -> float:
    """Global estimator: broken seminorm of the residual representative,
    raised to the power p - 1 (the discrete dual norm of the residual)."""
    return broken_seminorm(forms.test, r_coeffs, forms.p) ** (forms.p - 1.0)


def true_error(trial: DofMap, u_coeffs: np.ndarray, exact, quad: QuadRule,
               p: float) -> float:
    """Broken W^{1,p} distance between the exact and discrete gradients.

    ``exact`` is either an :class:`ExactSolution` or any object/callable
    exposing gradients on an (..., 2) point array; componentwise p-powers
    match the trial-space norm convention.
    """
    geo = geometry_of(trial.mesh)
    pts = quad.physical_points(geo.tri_coords)  # (nt, nq, 2)
    grad_fn = exact.gradient if hasattr(exact, "gradient") else exact
    g_exact = grad_fn(pts)
    g_h = all_element_gradients(trial, u_coeffs)
    diff = np.abs(g_exact - g_h[:, None, :]) ** p
    per_element = 2.0 * geo.areas * np.einsum("q,tqd->t", quad.weights, diff)
    return float(per_element.sum() ** (1.0 / p))


def dorfler_mark(masses: np.ndarray, theta: float) -> np.ndarray:
    """Smallest set of elements carrying a theta-fraction of the total mass.

    Greedy by descending mass with ties broken by the lower element index.
    Returns sorted element indices; an all-zero mass vector yields an empty
    marking and a warning.
    """
    masses = np.asarray(masses, dtype=float)
    if not 0.0 < theta <= 1.0:
        raise EstimateError("theta must lie in (0, 1]")
    if np.any(masses < 0.0):
        raise EstimateError("element masses must be nonnegative")
    total = float(masses.sum())
    if total == 0.0:
        warnings.warn("all element indicators vanish; nothing to mark",
                      stacklevel=2)
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-masses, kind="stable")
    csum = np.cumsum(masses[order])
    target = theta * total
    k = int(np.searchsorted(csum, target * (1.0 - 1e-13))) + 1
    k = min(k, int(np.count_nonzero(masses)))
    # minimality: dropping the smallest marked mass must fall short of theta
    assert k == 1 or csum[k - 2] < target * (1.0 - 1e-13)
    return np.sort(order[:k])


def fit_rate(records, quantity: str, window: int) -> float:
    """Least-squares slope of log(quantity) against log(n_total).

    ``quantity`` is ``"error"`` or ``"eta"``; the fit uses the last
    ``window`` records, which must all be positive.
    """
    if window < 2:
        raise EstimateError("rate fit needs at least two levels")
    tail = list(records)[-window:]
    if len(tail) < 2:
        raise EstimateError("not enough records for the requested window")
    x = np.array([rec.n_total for rec in tail], dtype=float)
    y = np.array([getattr(rec, quantity) for rec in tail], dtype=float)
    if np.any(x <= 0.0) or np.any(y <= 0.0):
        raise EstimateError("rate fit requires positive quantities")
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)
