"""Quasi-static swelling equilibrium of a voxel mesh.

The environment change is imposed by continuation: the Flory parameter of
every region (and the solvent chemical potential) is moved from its
self-equilibrated reference value to the target value over a schedule, and
each intermediate state is relaxed by a damped Newton method.  The Hessian is
assembled in banded form and factorised with LAPACK; an indefinite Hessian is
regularised by a diagonal shift.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numba as nb
import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

from .fem import DEFAULT_J_FLOOR, HexModel, MaterialTable, NonFiniteEnergyError, energy, gradient
from .materials import HydrogelParams, free_swell_stretch
from .strip import VoxelMesh

__all__ = ["SolverConfig", "DeformedState", "SolverError", "solve_equilibrium", "energy",
           "gradient", "free_swell_stretch", "rigid_constraint_dofs", "min_jacobian"]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class SolverConfig:
    schedule: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    max_iter: int = 40  # Newton iterations per continuation step
    tol: float = 1e-8  # final gradient tolerance, relative to the initial gradient
    step_tol: float = 1e-4  # looser tolerance on intermediate steps
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    max_bisections: int = 5
    j_floor: float = DEFAULT_J_FLOOR
    perturbation: float = 1e-3  # times voxel size
    seed: int = 0
    quadrature: int = 2

    def __post_init__(self):
        s = np.asarray(self.schedule, dtype=float)
        if s.ndim != 1 or len(s) == 0:
            raise ValueError("schedule must be a non-empty sequence")
        if not (s[0] > 0 and np.all(np.diff(s) > 0) and abs(s[-1] - 1.0) < 1e-12):
            raise ValueError("schedule must be strictly increasing in (0, 1] and end at 1")
        if self.quadrature != 2:
            raise ValueError("only 2x2x2 Gauss quadrature is implemented")
        self.schedule = tuple(float(v) for v in s)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DeformedState:
    displacements: np.ndarray  # (n_nodes, 3) um
    energy: float  # M * um^3
    converged: bool
    iterations: int
    grad_norm: float  # max nodal gradient norm, M * um^2
    grad_norm_initial: float
    min_J: float
    schedule_used: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def relative_grad_norm(self) -> float:
        if self.grad_norm_initial == 0:
            return 0.0
        return self.grad_norm / self.grad_norm_initial

    def positions(self, mesh: VoxelMesh) -> np.ndarray:
        return mesh.nodes + self.displacements

    def report(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations,
                "energy": self.energy, "grad_norm": self.grad_norm,
                "grad_norm_initial": self.grad_norm_initial,
                "relative_grad_norm": self.relative_grad_norm, "min_J": self.min_J,
                "schedule_used": list(self.schedule_used), "history": list(self.history)}

    def write_report(self, path) -> None:
        Path(path).write_text(json.dumps(self.report(), indent=2, sort_keys=True) + "\n")

    def write_vtk(self, mesh: VoxelMesh, path) -> None:
        mesh.write_vtk(path, self.displacements)


@nb.njit(cache=True)
def _min_J_kernel(x, elems, region, mat, dN):
    out = np.inf
    for e in range(elems.shape[0]):
        lam0 = mat[region[e], 1]
        for q in range(8):
            F = np.zeros((3, 3))
            for a in range(8):
                n = elems[e, a]
                for i in range(3):
                    for j in range(3):
                        F[i, j] += x[n, i] * dN[q, a, j]
            J = np.linalg.det(F) * lam0 ** 3
            out = min(out, J)
    return out


def min_jacobian(model: HexModel, u) -> float:
    """Smallest dry-referenced volume ratio ``J`` over all quadrature points."""
    return float(_min_J_kernel(model._positions(u), model.mesh.elements, model.mesh.element_region,
                               model.materials.table, model.dN))


def rigid_constraint_dofs(mesh: VoxelMesh) -> np.ndarray:
    """Six DOFs that remove rigid motions: 3 on node A, 2 on B, 1 on C.

    A sits at the centre of the mid-length bottom edge region, B is displaced
    from A across the width and C along the length, so the supports are
    statically determinate and carry no load at equilibrium.
    """
    nx, ny, nz = mesh.shape

    def nid(i, j, k):
        return k + (nz + 1) * (j + (ny + 1) * i)

    i0, j0 = nx // 2, ny // 2
    jb = j0 + max(1, ny // 4) if j0 + 1 <= ny else j0 - 1
    jb = min(jb, ny)
    ic = i0 + 1 if i0 + 1 <= nx else i0 - 1
    a, b, c = nid(i0, j0, 0), nid(i0, jb, 0), nid(ic, j0, 0)
    # B lies along y from A: fix x and z. C lies along x: fix z.
    return np.array([3 * a, 3 * a + 1, 3 * a + 2, 3 * b, 3 * b + 2, 3 * c + 2], dtype=np.int64)


def _constrain_banded(ab: np.ndarray, dofs: np.ndarray) -> None:
    bw = ab.shape[0] - 1
    n = ab.shape[1]
    for d in dofs:
        ab[:, d] = 0.0
        k = np.arange(1, min(bw, d) + 1)
        ab[k, d - k] = 0.0
        ab[0, d] = 1.0
    assert ab.shape[1] == n


def _factor(assemble):
    """Cholesky of the banded Hessian, shifting the diagonal until it succeeds.

    ``assemble`` rebuilds the banded matrix; it is called again after a failed
    attempt because the factorisation works in place.
    """
    ab = assemble()
    scale = float(np.mean(np.abs(ab[0])))
    shift = 0.0
    for _ in range(30):
        if shift > 0:
            ab = assemble()
            ab[0] += shift
        try:
            return cholesky_banded(ab, lower=True, overwrite_ab=True, check_finite=False), shift
        except LinAlgError:
            shift = 1e-6 * scale if shift == 0.0 else 10.0 * shift
    raise SolverError("could not factorise the Hessian even with a large shift")


def _nodal_max(g: np.ndarray) -> float:
    return float(np.sqrt(np.max(np.sum(g.reshape(-1, 3) ** 2, axis=1))))


def _interpolated_table(ref: MaterialTable, tgt: MaterialTable, t: float) -> MaterialTable:
    tab = ref.table.copy()
    tab[:, 2] = ref.table[:, 2] + t * (tgt.table[:, 2] - ref.table[:, 2])
    tab[:, 3] = ref.table[:, 3] + t * (tgt.table[:, 3] - ref.table[:, 3])
    return MaterialTable(tab)


def _newton(model: HexModel, u: np.ndarray, fixed: np.ndarray, tol_abs: float,
            cfg: SolverConfig, history: list, t: float):
    """Relax ``u`` at fixed materials.  Returns (u, converged, iterations, E, gnorm)."""
    E, g = model.energy_and_gradient(u)
    g = g.ravel()
    g[fixed] = 0.0
    gn = _nodal_max(g)
    for it in range(cfg.max_iter + 1):
        if gn <= tol_abs:
            return u, True, it, E, gn
        if it == cfg.max_iter:
            break

        def assemble():
            ab = model.hessian_banded(u)
            _constrain_banded(ab, fixed)
            return ab

        chol, shift = _factor(assemble)
        d = -cho_solve_banded((chol, True), g, check_finite=False)
        del chol
        d[fixed] = 0.0
        slope = float(g @ d)
        alpha = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            trial = u + alpha * d.reshape(-1, 3)
            E_new, g_new = model.energy_and_gradient(trial, raise_on_invalid=False)
            if np.isfinite(E_new):
                g_new = g_new.ravel()
                g_new[fixed] = 0.0
                gn_new = _nodal_max(g_new)
                if E_new <= E + cfg.armijo * alpha * slope:
                    accepted = True
                # energy differences below round-off: fall back on the gradient norm
                elif abs(E_new - E) <= 1e-13 * abs(E) and gn_new < gn:
                    accepted = True
            if accepted:
                break
            alpha *= cfg.backtrack
        if not accepted:
            log.debug("line search failed at t=%g iteration %d", t, it)
            return u, False, it, E, gn
        u, E, g, gn = trial, E_new, g_new, gn_new
        history.append({"t": t, "iteration": it + 1, "energy": E, "grad_norm": gn,
                        "step": alpha, "shift": shift})
        log.debug("t=%.4f it=%d E=%.12g |g|=%.3e alpha=%.3g shift=%.2e", t, it + 1, E, gn, alpha, shift)
    return u, False, cfg.max_iter, E, gn


def _as_table(materials, mu, n_regions) -> MaterialTable:
    if isinstance(materials, MaterialTable):
        return materials
    return MaterialTable.build(materials, mu, n_regions)


def solve_equilibrium(mesh: VoxelMesh, materials_target: Mapping[int, HydrogelParams],
                      config: Optional[SolverConfig] = None,
                      materials_reference: Optional[Mapping[int, HydrogelParams]] = None,
                      mu_over_kT: float = 0.0, initial: Optional[np.ndarray] = None,
                      materials_start: Optional[Mapping[int, HydrogelParams]] = None) -> DeformedState:
    """Equilibrium displacements of ``mesh`` in the target environment.

    ``materials_reference`` holds the as-designed (self-equilibrated) parameters
    of each region and fixes the reference stretch; when omitted the target
    network is taken to be referenced at its own free-swelling state.
    ``materials_target`` supplies the Flory parameter of each region in the
    environment.

    By default the continuation starts from the undeformed mesh with the
    reference Flory parameters.  ``initial`` gives starting displacements; with
    ``materials_start`` (the environment those displacements are in
    equilibrium with) the continuation runs from there, otherwise the state is
    relaxed directly at the target.  Convergence is always measured against
    the gradient of the undeformed mesh at the target.
    """
    cfg = config or SolverConfig()
    n_regions = int(mesh.element_region.max()) + 1
    if materials_reference is None:
        materials_reference = materials_target
    for r, p in materials_target.items():
        q = materials_reference.get(r)
        if q is None:
            raise ValueError(f"region {r} missing from reference materials")
        if abs(p.Nv - q.Nv) > 1e-9 * q.Nv:
            raise ValueError(f"region {r}: target and reference networks differ in Nv")
    ref = _as_table(materials_reference, 0.0, n_regions)
    ref.table[:, 3] = 0.0
    tgt = MaterialTable(ref.table.copy())
    for r, p in materials_target.items():
        tgt.table[r, 2] = p.chi
    tgt.table[:, 3] = mu_over_kT
    start = MaterialTable(ref.table.copy())
    if materials_start is not None:
        for r, p in materials_start.items():
            start.table[r, 2] = p.chi
    model = HexModel(mesh, tgt, j_floor=cfg.j_floor)
    fixed = rigid_constraint_dofs(mesh)

    t0 = time.perf_counter()
    _, g_ref = model.energy_and_gradient(np.zeros((mesh.n_nodes, 3)))
    g_ref = g_ref.ravel()
    g_ref[fixed] = 0.0
    g0 = _nodal_max(g_ref)
    u = np.zeros((mesh.n_nodes, 3)) if initial is None else np.array(initial, dtype=float).reshape(-1, 3)
    history: list = []
    # forces below this are round-off for the element stiffness scale
    g_floor = 1e-11 * mesh.voxel**2 * float(np.nanmax(ref.table[:, 0] / ref.table[:, 1]))
    if g0 <= g_floor and initial is None:
        E = model.energy(u)
        return DeformedState(u, E, True, 0, 0.0, 0.0, min_jacobian(model, u), [1.0], history)
    g0 = max(g0, g_floor)

    direct = initial is not None and materials_start is None
    pending = [1.0] if direct else list(cfg.schedule)
    depth = {t: 0 for t in pending}
    done: list = []
    path = [(0.0, u)]  # converged (t, displacement) pairs for the secant predictor
    total_it = 0
    perturbed = initial is not None or cfg.perturbation == 0
    while pending:
        t = pending[0]
        model.set_materials(_interpolated_table(start, tgt, t))
        t_prev, u = path[-1]
        trial = u.copy()
        if len(path) >= 2:
            t_before, u_before = path[-2]
            guess = u + (t - t_prev) / (t_prev - t_before) * (u - u_before)
            if np.isfinite(model.energy(guess, raise_on_invalid=False)):
                trial = guess
        if not perturbed:
            rng = np.random.default_rng(cfg.seed)
            noise = cfg.perturbation * mesh.voxel * rng.standard_normal(trial.shape)
            noise.ravel()[fixed] = 0.0
            trial = trial + noise
        last = len(pending) == 1
        tol_abs = max((cfg.tol if last else cfg.step_tol) * g0, g_floor)
        try:
            trial, ok, its, E, gn = _newton(model, trial, fixed, tol_abs, cfg, history, t)
        except NonFiniteEnergyError as exc:
            ok, its, E, gn = False, 0, np.inf, np.inf
            log.debug("start point invalid at t=%g: %s", t, exc)
        total_it += its
        if ok:
            path = path[-1:] + [(t, trial)]
            perturbed = True
            done.append(t)
            pending.pop(0)
            continue
        # refine the failing step
        if depth[t] >= cfg.max_bisections:
            diag = {"t_failed": t, "t_last_converged": t_prev, "grad_norm": gn,
                    "grad_norm_initial": g0, "iterations": total_it,
                    "elapsed_s": time.perf_counter() - t0}
            raise SolverError(f"no convergence at continuation factor {t:.6g}", diag)
        mid = 0.5 * (t_prev + t)
        depth[mid] = depth[t] + 1
        depth[t] += 1
        pending.insert(0, mid)
        log.info("bisecting continuation step: %.6g -> %.6g", t_prev, mid)

    u = path[-1][1]
    E, g = model.energy_and_gradient(u)
    g = g.ravel()
    g[fixed] = 0.0
    gn = _nodal_max(g)
    return DeformedState(u, E, True, total_it, gn, g0, min_jacobian(model, u), done, history)
