"""Study orchestration: refinement loops, record collection, artifacts.

A study solves the benchmark problem on a ladder of meshes.  Three
refinement strategies are supported:

* ``uniform`` -- red refinement each level (convergence studies);
* ``adaptive`` -- Dörfler marking on the local residual indicators
  followed by conforming bisection;
* ``pre_adapted_then_uniform`` -- the initial mesh is first adapted by
  running the linear (p = 2) adaptive loop a fixed number of steps, then
  the study proceeds with uniform refinement.

Every level restarts the exponent continuation from p = 2 by default so
iteration counts are comparable across levels; state transfer onto the
refined mesh is available as an opt-in warm start.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .estimate import (
    ExactSolution,
    StudyRecord,
    dorfler_mark,
    estimator_global,
    true_error,
)
from .forms import LoadSpec, NonlinearForms, assemble_load, local_indicators
from .mesh import Mesh, export_svg, mesh_size, refine_marked, refine_uniform, unit_square_mesh
from .newton import (
    ContinuationError,
    DiscreteState,
    IterationLog,
    SolverOptions,
    TargetRecord,
    continuation_solve,
    newton_solve,
)
from .spaces import CR, P1, DofMap, build_space, geometry_of, triangle_rule

log = logging.getLogger(__name__)

STRATEGIES = ("uniform", "pre_adapted_then_uniform", "adaptive")
WARM_STARTS = ("off", "direct")


@dataclass
class ProblemConfig:
    """Declarative description of one study."""

    p_target: float
    sigma: float = 0.97
    x0: tuple[float, float] = (-1.0, -1.0)
    initial_n: int = 2
    strategy: str = "uniform"
    theta: float = 0.5
    max_levels: int = 6
    solver: SolverOptions = field(default_factory=SolverOptions)
    load_quad_degree: int = 10
    error_quad_degree: int = 10
    pre_adapt_steps: int = 8
    warm_start: str = "off"
    snapshot_levels: tuple[int, ...] = (0, 2, 6)
    output_dir: str | None = None

    def __post_init__(self):
        if not self.p_target > 1.0:
            raise ValueError("p_target must be > 1")
        if not self.sigma < 2.0:
            raise ValueError("sigma must be < 2")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.max_levels < 1:
            raise ValueError("max_levels must be >= 1")
        if self.initial_n < 1:
            raise ValueError("initial_n must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.warm_start not in WARM_STARTS:
            raise ValueError(f"warm_start must be one of {WARM_STARTS}")


@dataclass
class LevelSolution:
    """Internal per-level bundle handed between study stages."""

    mesh: Mesh
    trial: DofMap
    test: DofMap
    forms: NonlinearForms
    state: DiscreteState
    log: IterationLog


def _forms_factory(mesh: Mesh, test: DofMap, load_free: np.ndarray,
                   sigma: float, x0):
    """Factory over the exponent; Dirichlet data follows the exponent."""
    def factory(p: float) -> NonlinearForms:
        es = ExactSolution(p, sigma, x0)
        trial = build_space(mesh, P1, es.boundary_data())
        return NonlinearForms(p, trial, test, load_free)
    return factory


def _solve_level(cfg: ProblemConfig, mesh: Mesh,
                 warm_state: DiscreteState | None) -> LevelSolution:
    test = build_space(mesh, CR)
    load_free = assemble_load(LoadSpec(sigma=cfg.sigma, x0=cfg.x0), test,
                              triangle_rule(cfg.load_quad_degree))
    factory = _forms_factory(mesh, test, load_free, cfg.sigma, cfg.x0)

    state = None
    itlog = None
    if warm_state is not None:
        forms_t = factory(cfg.p_target)
        result = newton_solve(forms_t, warm_state, cfg.solver)
        if result.converged:
            state = result.state
            itlog = IterationLog([TargetRecord(cfg.p_target, result.iterations,
                                               result.damping_events,
                                               result.final_increment, True,
                                               result.history)])
        else:
            log.warning("warm start failed at p=%.3f; falling back to "
                        "continuation", cfg.p_target)
    if state is None:
        state, itlog = continuation_solve(cfg.p_target, factory, cfg.solver)
    forms = factory(cfg.p_target)
    return LevelSolution(mesh, forms.trial, test, forms, state, itlog)


def pre_adapt_mesh(cfg: ProblemConfig, mesh: Mesh) -> Mesh:
    """Adapt the initial mesh with the linear p = 2 problem.

    Runs the estimator-driven loop at the linear exponent for
    ``cfg.pre_adapt_steps`` steps, producing an initial mesh that resolves
    the data singularity before the main (uniform) study starts.
    """
    linear = ProblemConfig(p_target=2.0, sigma=cfg.sigma, x0=cfg.x0,
                           initial_n=cfg.initial_n, strategy="adaptive",
                           theta=cfg.theta, max_levels=1, solver=cfg.solver,
                           load_quad_degree=cfg.load_quad_degree)
    for _ in range(cfg.pre_adapt_steps):
        sol = _solve_level(linear, mesh, None)
        masses = local_indicators(sol.forms, sol.state.r)
        marked = dorfler_mark(masses, cfg.theta)
        if marked.size == 0:
            break
        mesh = refine_marked(mesh, marked)
    return mesh


def run_study(cfg: ProblemConfig) -> list[StudyRecord]:
    """Execute the configured study and return one record per level.

    A continuation abort terminates the study early: the records collected
    so far are returned and a diagnostic is logged (and written next to
    the other artifacts when an output directory is configured).
    """
    mesh = unit_square_mesh(cfg.initial_n)
    if cfg.strategy == "pre_adapted_then_uniform":
        mesh = pre_adapt_mesh(cfg, mesh)

    out = _ArtifactWriter(cfg) if cfg.output_dir else None
    es_target = ExactSolution(cfg.p_target, cfg.sigma, cfg.x0)
    error_rule = triangle_rule(cfg.error_quad_degree)

    records: list[StudyRecord] = []
    warm_state: DiscreteState | None = None
    diagnostic = None
    for level in range(cfg.max_levels):
        t0 = time.perf_counter()
        try:
            sol = _solve_level(cfg, mesh, warm_state)
        except ContinuationError as exc:
            diagnostic = f"level {level}: {exc}"
            log.error("study aborted: %s", diagnostic)
            break

        error = true_error(sol.trial, sol.state.u, es_target, error_rule,
                           cfg.p_target)
        eta = estimator_global(sol.forms, sol.state.r)
        wall_ms = 1e3 * (time.perf_counter() - t0)
        records.append(StudyRecord(
            level=level,
            n_free_trial=sol.trial.n_free,
            n_free_test=sol.test.n_free,
            n_total=sol.trial.n_free + sol.test.n_free,
            h_max=mesh_size(mesh),
            error=error,
            eta=eta,
            eta_over_error=eta / error if error > 0 else np.inf,
            eta_root_over_error=(eta ** (1.0 / (cfg.p_target - 1.0)) / error
                                 if error > 0 else np.inf),
            newton_total=sol.log.total_iterations,
            damping_events=sol.log.total_damping_events,
            wall_ms=wall_ms,
        ))
        if out:
            out.telemetry(level, sol.log)
            if cfg.strategy == "adaptive" and level in cfg.snapshot_levels:
                out.snapshot(level, mesh)

        if level + 1 < cfg.max_levels:
            if cfg.strategy == "adaptive":
                masses = local_indicators(sol.forms, sol.state.r)
                marked = dorfler_mark(masses, cfg.theta)
                new_mesh = refine_marked(mesh, marked)
            else:
                new_mesh = refine_uniform(mesh)
            if cfg.warm_start == "direct":
                new_trial = build_space(new_mesh, P1)
                new_test = build_space(new_mesh, CR)
                warm_state = transfer_state(sol.state, sol.trial, sol.test,
                                            new_trial, new_test)
            mesh = new_mesh

    if out:
        out.finish(records, diagnostic)
    return records


def transfer_state(state: DiscreteState, old_trial: DofMap, old_test: DofMap,
                   new_trial: DofMap, new_test: DofMap) -> DiscreteState:
    """Prolong a discrete state onto a refinement of its mesh.

    The trial part is transferred exactly (new vertices are old-edge
    midpoints, where a P1 function equals the endpoint average).  The
    residual representative is re-interpolated in the CR sense: each new
    edge receives the value of the old broken function at its midpoint,
    evaluated on the parent element and averaged across the adjacent new
    elements.  Without genealogy the transfer falls back to a zero
    interior state.
    """
    old_mesh = old_trial.mesh
    new_mesh = new_trial.mesh
    if new_mesh is old_mesh:
        return DiscreteState(state.u.copy(), state.r.copy(), state.p_current)
    if np.any(new_mesh.parent < 0):
        log.warning("missing genealogy; warm start from zero interior state")
        return DiscreteState(new_trial.zero_full(),
                             np.zeros(new_test.n_total), state.p_current)

    parents = new_mesh.vertex_parents
    u_new = 0.5 * (state.u[parents[:, 0]] + state.u[parents[:, 1]])

    # broken evaluation of the old CR function at new edge midpoints
    geo_old = geometry_of(old_mesh)
    mids = new_mesh.edge_midpoints()
    tpar = new_mesh.parent
    r_acc = np.zeros(new_mesh.n_edges)
    r_cnt = np.zeros(new_mesh.n_edges)
    old_dofs = old_mesh.triangle_edges
    for local in range(3):
        edge_ids = new_mesh.triangle_edges[:, local]
        x = mids[edge_ids]                      # (nt_new, 2)
        par = tpar                              # parent per new triangle
        origin = old_mesh.vertices[old_mesh.triangles[par, 0]]
        jac = np.stack([old_mesh.vertices[old_mesh.triangles[par, 1]] - origin,
                        old_mesh.vertices[old_mesh.triangles[par, 2]] - origin],
                       axis=2)                  # columns are edge vectors
        rhs = x - origin
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        lam1 = (rhs[:, 0] * jac[:, 1, 1] - rhs[:, 1] * jac[:, 0, 1]) / det
        lam2 = (rhs[:, 1] * jac[:, 0, 0] - rhs[:, 0] * jac[:, 1, 0]) / det
        lam = np.stack([1.0 - lam1 - lam2, lam1, lam2], axis=1)
        phi = 1.0 - 2.0 * lam                   # CR basis on the parent
        vals = np.einsum("ti,ti->t", state.r[old_dofs[par]], phi)
        np.add.at(r_acc, edge_ids, vals)
        np.add.at(r_cnt, edge_ids, 1.0)
    r_new = r_acc / np.maximum(r_cnt, 1.0)
    r_new[new_test.constrained_dofs] = 0.0
    # boundary trial values stay prolonged; the Newton solve clamps them to
    # the target problem's Dirichlet data anyway
    return DiscreteState(u_new, r_new, state.p_current)


class _ArtifactWriter:
    """CSV records, JSON-lines telemetry and SVG snapshots of one study."""

    def __init__(self, cfg: ProblemConfig):
        self.cfg = cfg
        self.dir = Path(cfg.output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._telemetry_lines: list[str] = []

    def telemetry(self, level: int, itlog: IterationLog):
        for rec in itlog.records:
            self._telemetry_lines.append(rec.as_json(level=level))

    def snapshot(self, level: int, mesh: Mesh):
        export_svg(mesh, self.dir / f"mesh_step_{level}.svg")

    def finish(self, records, diagnostic):
        csv_path = self.dir / "records.csv"
        lines = [StudyRecord.CSV_HEADER] + [r.csv_row() for r in records]
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        (self.dir / "telemetry.jsonl").write_text(
            "\n".join(self._telemetry_lines) + "\n", encoding="utf-8")
        meta = asdict(self.cfg)
        meta["ndof_convention"] = ("n_total = free trial DOFs + free test "
                                   "DOFs; trial and test counts are also "
                                   "reported separately")
        if diagnostic:
            meta["diagnostic"] = diagnostic
        (self.dir / "metadata.json").write_text(
            json.dumps(meta, indent=2, default=str) + "\n", encoding="utf-8")
