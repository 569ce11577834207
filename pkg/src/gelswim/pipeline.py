"""End-to-end design pipeline: recipe -> mesh -> swelling -> helix -> beads ->
mobility -> frequency response, for each environment of a design.

Environments are solved in the listed order, each continuing from the
previous equilibrium, which is both cheaper and closer to how a printed tail
is moved between solvents.  Deformations are cached on a content hash of
everything that determines them, so changes to the head, magnet or field
program reuse them.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .helix import HelixFitError, HelixParams, extract_centerline, fit_helix
from .hydro import beadify, rigid_body_mobility
from .magdyn import FLUIDS, FieldProgram, Fluid, FrequencyResponse, MagneticBody, frequency_response
from .materials import HydrogelParams, PowerTrend, RecipeCalibration, free_swell_stretch
from .solver import DeformedState, SolverConfig, SolverError, solve_equilibrium
from .strip import HARD, REGION_NAMES, SOFT, StripDesign, build_mesh

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
REGION_IDS = {name: rid for rid, name in REGION_NAMES.items()}


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str, diagnostics: Optional[dict] = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# default calibration (assumed, see README): one recipe, two print powers
# ---------------------------------------------------------------------------

def default_recipe() -> RecipeCalibration:
    """Saturating trends for the NIPAM/AAc recipe up to 40 mW.

    The crosslink trend starts at 22 mW, the swelling trends at 20 mW.

    Crosslink density rises towards 0.27 and deswelling ratios approach 1 at
    high power; the water stretch is the characterisation state.
    """
    return RecipeCalibration(
        name="default",
        nv=PowerTrend(0.27, -14.2, 0.1876, 22.0, 40.0),
        lambda0=PowerTrend(1.27, 3.95, 0.1645, 20.0, 40.0),
        deswelling={"water": PowerTrend(1.0, -1.233, 0.09155, 20.0, 40.0),
                    "ipa": PowerTrend(1.0, -4.31, 0.1733, 20.0, 40.0)},
        characterization_solvent="water",
    )


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class EnvironmentSpec:
    name: str
    solvent: str  # deswelling trend key, or "design" for the as-printed state
    fluid: Fluid
    chi: dict = field(default_factory=dict)  # region name -> Flory parameter override
    lambda0: dict = field(default_factory=dict)  # region name -> stretch override

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentSpec":
        name = d.get("name")
        if not name:
            raise ConfigError("environment needs a name")
        solvent = d.get("solvent", name)
        fl = d.get("fluid", solvent)
        if isinstance(fl, str):
            if fl not in FLUIDS:
                raise ConfigError(f"unknown fluid '{fl}'")
            fluid = FLUIDS[fl]
        else:
            try:
                fluid = Fluid(fl.get("name", name), float(fl["density"]), float(fl["viscosity"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad fluid for environment {name}: {exc}") from exc
        return cls(name, solvent, fluid, dict(d.get("chi", {})), dict(d.get("lambda0", {})))

    def to_dict(self) -> dict:
        return {"name": self.name, "solvent": self.solvent,
                "fluid": {"name": self.fluid.name, "density": self.fluid.density,
                          "viscosity": self.fluid.viscosity},
                "chi": self.chi, "lambda0": self.lambda0}


DEFAULT_HEAD = {"dims": [45.0, 30.0, 15.0], "offset": None, "bead_radius": None,
                "tube_radius": None}
DEFAULT_MAGNET = {"measured_emu": 2.8e-6, "scale_by_ten": True}
DEFAULT_FIELD = {"frequencies": [float(f) for f in range(5, 205, 5)], "B_low": 5.0, "B_high": 2.9,
                 "f_knee": 50.0, "f_high": 200.0, "sense": 1}


@dataclass
class PipelineConfig:
    design: StripDesign
    environments: list
    recipe: RecipeCalibration
    voxel: float = 0.5
    head: dict = field(default_factory=lambda: dict(DEFAULT_HEAD))
    magnet: dict = field(default_factory=lambda: dict(DEFAULT_MAGNET))
    field_program: dict = field(default_factory=lambda: dict(DEFAULT_FIELD))
    solver: dict = field(default_factory=dict)
    seed: int = 0
    sweep: dict = field(default_factory=dict)  # e.g. {"theta": [15, 30]}
    search: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        base = Path(base_dir) if base_dir else Path(".")
        try:
            if "design_file" in d:
                design = StripDesign.from_json(base / d["design_file"])
            else:
                design = StripDesign.from_dict(d.get("design", {}))
        except (OSError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad design: {exc}") from exc
        try:
            if "recipe_file" in d:
                recipe = RecipeCalibration.from_dict(json.loads((base / d["recipe_file"]).read_text()))
            elif "recipe" in d:
                recipe = RecipeCalibration.from_dict(d["recipe"])
            else:
                recipe = default_recipe()
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad recipe: {exc}") from exc
        envs = [EnvironmentSpec.from_dict(e) for e in d.get("environments", [])]
        if not envs:
            raise ConfigError("at least one environment is required")
        names = [e.name for e in envs]
        if len(set(names)) != len(names):
            raise ConfigError("environment names must be unique")
        for e in envs:
            if e.solvent != "design" and e.solvent not in recipe.deswelling and not e.chi \
                    and not e.lambda0:
                raise ConfigError(f"no deswelling trend for solvent '{e.solvent}'")
            for key in list(e.chi) + list(e.lambda0):
                if key not in REGION_IDS:
                    raise ConfigError(f"unknown region '{key}' in environment {e.name}")
        head = dict(DEFAULT_HEAD, **d.get("head", {}))
        magnet = dict(DEFAULT_MAGNET, **d.get("magnet", {}))
        fprog = dict(DEFAULT_FIELD, **d.get("field", {}))
        solver = dict(d.get("solver", {}))
        try:
            SolverConfig(**solver)
            _field_program(fprog)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad solver or field settings: {exc}") from exc
        voxel = float(d.get("voxel", 0.5))
        if not voxel > 0:
            raise ConfigError("voxel must be positive")
        return cls(design, envs, recipe, voxel, head, magnet, fprog, solver,
                   int(d.get("seed", 0)), dict(d.get("sweep", {})), dict(d.get("search", {})))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict:
        return {"version": CONFIG_VERSION, "design": self.design.to_dict(),
                "environments": [e.to_dict() for e in self.environments],
                "recipe": self.recipe.to_dict(), "voxel": self.voxel, "head": self.head,
                "magnet": self.magnet, "field": self.field_program, "solver": self.solver,
                "seed": self.seed, "sweep": self.sweep, "search": self.search}

    def with_design(self, **changes) -> "PipelineConfig":
        new = copy.deepcopy(self)
        new.design = StripDesign.from_dict(dict(self.design.to_dict(), **changes))
        return new

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**dict(self.solver, seed=self.seed))

    def hash(self) -> str:
        return content_hash(self.to_dict())


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def content_hash(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serialisable: {type(o)}")


def _field_program(fp: dict, frequencies=None) -> FieldProgram:
    return FieldProgram(np.asarray(frequencies if frequencies is not None else fp["frequencies"], float),
                        sense=int(fp.get("sense", 1)), B_low=float(fp["B_low"]),
                        B_high=float(fp["B_high"]), f_knee=float(fp["f_knee"]),
                        f_high=float(fp["f_high"]))


# ---------------------------------------------------------------------------
# materials per environment
# ---------------------------------------------------------------------------

def region_powers(design: StripDesign) -> dict:
    return {SOFT: design.soft_power, HARD: design.hard_power}


def reference_materials(config: PipelineConfig) -> dict:
    return {rid: config.recipe.params(lp, "design") for rid, lp in region_powers(config.design).items()}


def environment_materials(config: PipelineConfig, env: EnvironmentSpec) -> dict:
    out = {}
    for rid, lp in region_powers(config.design).items():
        name = REGION_NAMES[rid]
        ref = config.recipe.params(lp, "design")
        if name in env.chi:
            chi = float(env.chi[name])
            out[rid] = HydrogelParams(ref.Nv, free_swell_stretch(ref.Nv, chi), chi, ref.M)
        elif name in env.lambda0:
            out[rid] = HydrogelParams.from_state(ref.Nv, float(env.lambda0[name]), ref.M)
        elif env.solvent == "design":
            out[rid] = ref
        else:
            out[rid] = config.recipe.params(lp, env.solvent)
    return out


# ---------------------------------------------------------------------------
# deformation cache
# ---------------------------------------------------------------------------

class DeformationCache:
    """Hash-keyed store of solved displacements (``.npz``) and solver reports."""

    def __init__(self, root: Optional[Path]):
        self.root = Path(root) if root else None
        self._memory: dict = {}
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)

    def get(self, key: str) -> Optional[DeformedState]:
        if key in self._memory:
            return self._memory[key]
        if self.root is None:
            return None
        path = self.root / f"{key}.npz"
        if not path.exists():
            return None
        with np.load(path, allow_pickle=False) as z:
            rep = json.loads(str(z["report"]))
            state = DeformedState(z["u"].copy(), rep["energy"], rep["converged"], rep["iterations"],
                                  rep["grad_norm"], rep["grad_norm_initial"], rep["min_J"],
                                  rep["schedule_used"], rep.get("history", []))
        self._memory[key] = state
        return state

    def put(self, key: str, state: DeformedState) -> None:
        self._memory[key] = state
        if self.root is None:
            return
        rep = _canonical(state.report())
        tmp = self.root / f"{key}.tmp.npz"
        np.savez(tmp, u=state.displacements, report=np.array(rep))
        tmp.replace(self.root / f"{key}.npz")


def deformation_key(config: PipelineConfig, env_index: int) -> str:
    chain = [config.environments[i].to_dict() for i in range(env_index + 1)]
    for c in chain:
        c.pop("fluid")  # the fluid does not enter the swelling problem
    payload = {"design": config.design.to_dict(), "voxel": config.voxel,
               "recipe": config.recipe.to_dict(), "chain": chain,
               "solver": config.solver_config().to_dict(), "code": __version__}
    return content_hash(payload)


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def _round(x, digits: int = 10):
    """Round floats to ``digits`` significant figures for stable reports."""
    if isinstance(x, dict):
        return {k: _round(v, digits) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v, digits) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            return None
        return float(f"{x:.{digits}g}")
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class EnvironmentResult:
    name: str
    solver: dict
    helix: Optional[HelixParams]
    centerline: np.ndarray
    response: Optional[FrequencyResponse]
    straight: bool
    n_beads: int = 0
    displacements: Optional[np.ndarray] = None

    def summary(self) -> dict:
        d = {"solver": {k: v for k, v in self.solver.items() if k != "history"},
             "straight": self.straight, "n_beads": self.n_beads,
             "helix": self.helix.to_dict() if self.helix else None}
        if self.response is not None:
            d["frequency_response"] = self.response.to_dict()
            d["step_out_hz"] = self.response.step_out
            d["max_speed_um_s"] = self.response.max_speed
        else:
            d["frequency_response"] = None
            d["step_out_hz"] = None
            d["max_speed_um_s"] = 0.0
        return d


@dataclass
class DesignReport:
    config: PipelineConfig
    environments: dict  # name -> EnvironmentResult
    provenance: dict

    def to_dict(self) -> dict:
        return _round({"provenance": self.provenance, "design": self.config.design.to_dict(),
                       "environments": {k: v.summary() for k, v in self.environments.items()}})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default) + "\n"


def provenance(config: PipelineConfig) -> dict:
    import numba
    import scipy
    return {"config_hash": config.hash(), "seed": config.seed, "package_version": __version__,
            "versions": {"python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__, "numba": numba.__version__}}


def solve_environments(config: PipelineConfig, cache: Optional[DeformationCache] = None,
                       mesh=None) -> list:
    """Deformed states for every environment, chained in order, with caching."""
    cache = cache or DeformationCache(None)
    mesh = mesh if mesh is not None else build_mesh(config.design, config.voxel)
    ref = reference_materials(config)
    cfg = config.solver_config()
    states = []
    prev_state, prev_mats = None, None
    for i, env in enumerate(config.environments):
        key = deformation_key(config, i)
        mats = environment_materials(config, env)
        state = cache.get(key)
        if state is None:
            t0 = time.perf_counter()
            try:
                if prev_state is None:
                    state = solve_equilibrium(mesh, mats, cfg, materials_reference=ref)
                else:
                    state = solve_equilibrium(mesh, mats, cfg, materials_reference=ref,
                                              initial=prev_state.displacements,
                                              materials_start=prev_mats)
            except SolverError as exc:
                raise PipelineError("swell", f"environment {env.name}: {exc}", exc.diagnostics) from exc
            log.info("solved %s in %.1f s (%d iterations)", env.name, time.perf_counter() - t0,
                     state.iterations)
            cache.put(key, state)
        states.append(state)
        prev_state, prev_mats = state, mats
    return states


def analyse_shape(mesh, state: DeformedState):
    """Centerline and helix fit; ``None`` helix for a straight strip."""
    cl = extract_centerline(mesh, state)
    try:
        return cl, fit_helix(cl)
    except HelixFitError:
        return cl, None


def build_body(config: PipelineConfig, helix: HelixParams, fluid: Fluid):
    """Bead model, mobility and magnetic body for a fitted tail."""
    design = config.design
    head = config.head
    tube = head.get("tube_radius") or 0.5 * design.W
    a = head.get("bead_radius") or tube
    dims = [float(v) for v in head["dims"]]
    a = min(a, 0.5 * min(dims))
    offset = head.get("offset")
    offset = 0.5 * dims[0] + a if offset is None else float(offset)
    beads = beadify(helix, tube, dims, offset, a, viscosity=fluid.viscosity)
    mob = rigid_body_mobility(beads)
    body = MagneticBody.from_emu(mob, helix.start_direction, helix.axis, helix.length,
                                 measured_emu=float(config.magnet["measured_emu"]),
                                 scale_by_ten=bool(config.magnet["scale_by_ten"]),
                                 viscosity=fluid.viscosity)
    return beads, body


def run_pipeline(config: PipelineConfig, cache_dir=None, keep_displacements: bool = False,
                 frequencies=None) -> DesignReport:
    cache = DeformationCache(cache_dir)
    try:
        mesh = build_mesh(config.design, config.voxel)
    except ValueError as exc:
        raise PipelineError("mesh", str(exc)) from exc
    states = solve_environments(config, cache, mesh)
    program = _field_program(config.field_program, frequencies)
    results = {}
    for env, state in zip(config.environments, states):
        try:
            cl, helix = analyse_shape(mesh, state)
        except ValueError as exc:
            raise PipelineError("helix", f"environment {env.name}: {exc}") from exc
        response, n_beads = None, 0
        if helix is not None:
            try:
                beads, body = build_body(config, helix, env.fluid)
                n_beads = len(beads)
                response = frequency_response(body, program)
            except ValueError as exc:
                raise PipelineError("dynamics", f"environment {env.name}: {exc}") from exc
        results[env.name] = EnvironmentResult(env.name, state.report(), helix, cl, response,
                                              helix is None, n_beads,
                                              state.displacements if keep_displacements else None)
    return DesignReport(config, results, provenance(config))


# ---------------------------------------------------------------------------
# sweeps and search
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    parameter: str
    values: list
    reports: list  # DesignReport per value

    def table(self, env: str) -> list:
        rows = []
        for v, rep in zip(self.values, self.reports):
            r = rep.environments[env]
            h = r.helix
            rows.append({self.parameter: v, "D_um": h.D if h else 0.0, "P_um": h.P if h else 0.0,
                         "alpha_deg": h.alpha if h else 0.0, "n_turns": h.n if h else 0.0,
                         "step_out_hz": r.response.step_out if r.response else None,
                         "max_speed_um_s": r.response.max_speed if r.response else 0.0})
        return rows

    def to_dict(self) -> dict:
        envs = list(self.reports[0].environments) if self.reports else []
        return _round({"parameter": self.parameter, "values": self.values,
                       "tables": {e: self.table(e) for e in envs},
                       "reports": [r.to_dict() for r in self.reports]})


def run_sweep(config: PipelineConfig, parameter: str, values: Sequence[float], cache_dir=None,
              frequencies=None) -> SweepResult:
    reports = [run_pipeline(config.with_design(**{parameter: v}), cache_dir, frequencies=frequencies)
               for v in values]
    return SweepResult(parameter, list(values), reports)


@dataclass
class SwimTarget:
    """Synchronous swimming at ``frequency`` in every listed environment; the
    score is the smallest speed there (higher is better)."""
    frequency: float
    environments: Optional[list] = None

    def evaluate(self, report: DesignReport):
        envs = self.environments or list(report.environments)
        speeds = []
        for name in envs:
            r = report.environments.get(name)
            if r is None:
                return False, 0.0, f"environment {name} missing"
            if r.response is None:
                return False, 0.0, f"{name}: straight tail, no propulsion"
            program = _field_program(report.config.field_program, [self.frequency])
            u = _speed_at(report.config, r, self.frequency, program)
            if u is None:
                return False, 0.0, f"{name}: not synchronous at {self.frequency:g} Hz"
            speeds.append(abs(u))
        return True, float(min(speeds)), "ok"


def _speed_at(config, result: EnvironmentResult, f: float, program) -> Optional[float]:
    env = next(e for e in config.environments if e.name == result.name)
    _, body = build_body(config, result.helix, env.fluid)
    resp = frequency_response(body, program)
    return float(resp.u_z[0]) if resp.feasible[0] else None


@dataclass
class SearchEntry:
    design: dict
    satisfied: bool
    score: float
    reason: str


def design_search(target, grid: dict, config: PipelineConfig, cache_dir=None) -> tuple:
    """Evaluate every grid point; return (ranked admissible entries, all entries).

    ``grid`` maps design field names to value lists; ``target`` is a
    :class:`SwimTarget` or any callable ``report -> (ok, score, reason)``.
    """
    evaluate = target.evaluate if hasattr(target, "evaluate") else target
    keys = sorted(grid)
    combos = [dict()]
    for k in keys:
        combos = [dict(c, **{k: v}) for c in combos for v in grid[k]]
    entries = []
    for combo in combos:
        cfg = config.with_design(**combo)
        try:
            rep = run_pipeline(cfg, cache_dir)
            ok, score, reason = evaluate(rep)
        except PipelineError as exc:
            ok, score, reason = False, 0.0, str(exc)
        entries.append(SearchEntry(cfg.design.to_dict(), bool(ok), float(score), reason))
    ranked = sorted([e for e in entries if e.satisfied], key=lambda e: (-e.score, _canonical(e.design)))
    return ranked, entries
