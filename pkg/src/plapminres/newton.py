"""Damped Newton iteration on the mixed residual-minimization system and
the exponent-continuation driver.

One Newton step linearizes both nonlinear maps of the mixed system around
the current iterate ``(r, u)`` and solves the symmetric saddle system

    [ G   B ] [dr]   [ F - D(r) - N(u) ]
    [ B^T 0 ] [du] = [ -B^T r          ]

where ``G`` is the duality-map Hessian, ``B`` the operator Jacobian, ``D``
the duality-map action and ``N`` the p-Laplacian action.  Updates are
damped by a backtracking line search on the Euclidean norm of the
concatenated nonlinear residual; an accepted step never increases it
(after the maximum number of halvings the best candidate is accepted and
counted as a damping event).

Convergence is declared when the undamped increment, measured as the sum
of the two broken seminorms at the current exponent, drops below the
tolerance, or when the residual itself reaches the round-off floor (the
path taken by the linear case p = 2, which therefore converges in a
single iteration from any state).

Since Newton far from p = 2 needs a good initial guess, the continuation
driver first solves the linear p = 2 problem cold and then walks the
exponent in fixed steps toward the target, warm-starting every solve from
the previous state and halving the local step after a failed solve.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .forms import (
    NonlinearForms,
    apply_duality_map,
    apply_plaplacian,
    assemble_duality_jacobian,
    assemble_operator_jacobian,
)
from .linsolve import LinearSolveError, assemble_saddle, solve_symmetric_indefinite
from .spaces import broken_seminorm


class ContinuationError(RuntimeError):
    """Continuation step underflow; carries the log collected so far."""

    def __init__(self, message: str, log: "IterationLog"):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True, eq=False)
class DiscreteState:
    """Full coefficient vectors of one (mesh, p) iterate."""

    u: np.ndarray
    r: np.ndarray
    p_current: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.r))):
            raise ValueError("state coefficients must be finite")


@dataclass(frozen=True)
class SolverOptions:
    newton_tol: float = 1e-8
    max_newton: int = 50
    continuation_step: float = 0.10
    min_step: float = 1e-3
    damping_enabled: bool = True
    backtrack_factor: float = 0.5
    max_backtracks: int = 12
    linear_rel_tol: float = 1e-10
    linear_method: str = "direct"

    def __post_init__(self):
        if min(self.newton_tol, self.continuation_step, self.min_step,
               self.linear_rel_tol) <= 0 or self.max_newton < 1:
            raise ValueError("solver options must be positive")
        if self.continuation_step < self.min_step:
            raise ValueError("continuation_step must be >= min_step")


@dataclass
class TargetRecord:
    """Newton statistics of one continuation target."""

    p: float
    iterations: int
    damping_events: int
    final_increment: float
    converged: bool
    history: list[dict] = field(default_factory=list)

    def as_json(self, **extra) -> str:
        payload = dict(extra)
        payload.update({
            "p": self.p, "iterations": self.iterations,
            "damping_events": self.damping_events,
            "final_increment": self.final_increment,
            "converged": self.converged,
            "increments": [h.get("increment") for h in self.history],
            "linear_residuals": [h.get("linear_residual")
                                 for h in self.history],
        })
        return json.dumps(payload)


@dataclass
class IterationLog:
    """Per-target records and the accumulated Newton iteration count."""

    records: list[TargetRecord] = field(default_factory=list)

    @property
    def total_iterations(self) -> int:
        return sum(rec.iterations for rec in self.records)

    @property
    def total_damping_events(self) -> int:
        return sum(rec.damping_events for rec in self.records)

    def to_jsonl(self) -> str:
        return "\n".join(rec.as_json() for rec in self.records)


@dataclass
class NewtonResult:
    state: DiscreteState
    iterations: int
    damping_events: int
    converged: bool
    final_increment: float
    history: list[dict]


def nonlinear_residual(forms: NonlinearForms, state: DiscreteState,
                       operator_jacobian=None):
    """Residual blocks of the mixed system at the given state.

    Returns ``(top, bottom)`` over free test and free trial DOFs; both
    vanish at an exact discrete solution.  ``operator_jacobian`` may pass a
    pre-assembled Jacobian at ``state.u`` to avoid recomputation.
    """
    B = operator_jacobian
    if B is None:
        B = assemble_operator_jacobian(forms, state.u)
    top = (forms.load_free - apply_duality_map(forms, state.r)
           - apply_plaplacian(forms, state.u))
    bottom = -(B.T @ state.r[forms.test.free_dofs])
    return top, bottom


def _residual_norm(top: np.ndarray, bottom: np.ndarray) -> float:
    return float(np.sqrt(top @ top + bottom @ bottom))


def newton_solve(forms: NonlinearForms, state_init: DiscreteState,
                 opts: SolverOptions) -> NewtonResult:
    """Damped Newton iteration at a fixed exponent.

    Returns a :class:`NewtonResult`; on iteration cap or linear-solve
    failure ``converged`` is False and ``state`` carries the best iterate.
    """
    trial, test = forms.trial, forms.test
    u = state_init.u.copy()
    r = state_init.r.copy()
    # clamp the constrained entries to the data of this problem
    u[trial.constrained_dofs] = trial.constrained_values[trial.constrained_dofs]
    r[test.constrained_dofs] = 0.0

    B = assemble_operator_jacobian(forms, u)
    top, bottom = nonlinear_residual(forms, DiscreteState(u, r, forms.p), B)
    res_norm = _residual_norm(top, bottom)
    res_floor = 1e-12 * (1.0 + float(np.linalg.norm(forms.load_free)))

    history: list[dict] = []
    damping_events = 0
    increment = np.inf

    for iteration in range(1, opts.max_newton + 1):
        G = assemble_duality_jacobian(forms, r)
        system = assemble_saddle(G, B, top, bottom)
        try:
            dr, du, lin_res = solve_symmetric_indefinite(
                system, opts.linear_rel_tol, method=opts.linear_method)
        except LinearSolveError as exc:
            history.append({"iteration": iteration, "error": str(exc)})
            return NewtonResult(DiscreteState(u, r, forms.p), iteration - 1,
                                damping_events, False, increment, history)

        alpha = 1.0
        damped = False
        best = None
        for _ in range(opts.max_backtracks + 1):
            u_try = u.copy()
            r_try = r.copy()
            u_try[trial.free_dofs] += alpha * du
            r_try[test.free_dofs] += alpha * dr
            B_try = assemble_operator_jacobian(forms, u_try)
            top_try, bottom_try = nonlinear_residual(
                forms, DiscreteState(u_try, r_try, forms.p), B_try)
            norm_try = _residual_norm(top_try, bottom_try)
            if best is None or norm_try < best[0]:
                best = (norm_try, u_try, r_try, B_try, top_try, bottom_try)
            if norm_try <= res_norm or not opts.damping_enabled:
                break
            damped = True
            alpha *= opts.backtrack_factor
        if damped:
            damping_events += 1
        res_norm, u, r, B, top, bottom = (best[0], best[1], best[2],
                                          best[3], best[4], best[5])

        dr_full = np.zeros(test.n_total)
        dr_full[test.free_dofs] = dr
        du_full = np.zeros(trial.n_total)
        du_full[trial.free_dofs] = du
        increment = (broken_seminorm(test, dr_full, forms.p)
                     + broken_seminorm(trial, du_full, forms.p))
        history.append({"iteration": iteration, "increment": increment,
                        "residual": res_norm, "damped": damped,
                        "linear_residual": lin_res})

        if increment < opts.newton_tol or res_norm <= res_floor:
            return NewtonResult(DiscreteState(u, r, forms.p), iteration,
                                damping_events, True, increment, history)

    return NewtonResult(DiscreteState(u, r, forms.p), opts.max_newton,
                        damping_events, False, increment, history)


def cold_state(forms: NonlinearForms) -> DiscreteState:
    """Zero interior values with the prescribed boundary data."""
    return DiscreteState(forms.trial.zero_full(),
                         np.zeros(forms.test.n_total), forms.p)


def continuation_solve(p_target: float, forms_factory, opts: SolverOptions
                       ) -> tuple[DiscreteState, IterationLog]:
    """Walk the exponent from 2 to ``p_target``, warm-starting Newton.

    ``forms_factory(p)`` must return the :class:`NonlinearForms` of the
    problem at exponent ``p`` (in particular with that exponent's Dirichlet
    data).  The linear case is solved first without an initial guess; a
    failed Newton solve halves the local step and retries from the last
    converged state, aborting with :class:`ContinuationError` when the
    step underflows ``opts.min_step``.
    """
    if not p_target > 1.0:
        raise ValueError("p_target must be > 1")
    log = IterationLog()

    forms2 = forms_factory(2.0)
    result = newton_solve(forms2, cold_state(forms2), opts)
    log.records.append(TargetRecord(2.0, result.iterations,
                                    result.damping_events,
                                    result.final_increment, result.converged,
                                    result.history))
    if not result.converged:
        raise ContinuationError("linear stage p = 2 did not converge", log)
    state = result.state
    if p_target == 2.0:
        return state, log

    direction = 1.0 if p_target > 2.0 else -1.0
    current = 2.0
    while current != p_target:
        step = opts.continuation_step
        while True:
            if abs(p_target - current) <= step * (1.0 + 1e-12):
                p_next = p_target
            else:
                p_next = current + direction * step
            forms_p = forms_factory(p_next)
            warm = DiscreteState(state.u, state.r, p_next)
            result = newton_solve(forms_p, warm, opts)
            log.records.append(TargetRecord(p_next, result.iterations,
                                            result.damping_events,
                                            result.final_increment,
                                            result.converged,
                                            result.history))
            if result.converged:
                state = result.state
                current = p_next
                break
            step *= 0.5
            if step < opts.min_step:
                raise ContinuationError(
                    f"continuation step underflow at p = {current:.4f} "
                    f"toward {p_target}", log)
    return state, log
