"""Hydrogel constitutive model: Flory-Rehner type free energy with a Legendre
transform in the solvent chemical potential.

All energies are per dry volume in units of ``kT/v``; the stress scale ``M = kT/v``
converts them to Pa.  Stretches without a prime are measured from the dry
network, primed stretches from the free-swelling state.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .fitting import levmar

K_BOLTZMANN = 1.380649e-23  # J/K
DEFAULT_TEMPERATURE = 298.0  # K
DEFAULT_SOLVENT_VOLUME = 3.0e-29  # m^3, one water-like molecule


def stress_scale(temperature: float = DEFAULT_TEMPERATURE,
                 solvent_volume: float = DEFAULT_SOLVENT_VOLUME) -> float:
    """Return ``M = kT/v`` in Pa."""
    return K_BOLTZMANN * temperature / solvent_volume


DEFAULT_M = stress_scale()


class MaterialError(ValueError):
    """Raised when a material state is outside the physical regime."""


class IllPosedFitError(MaterialError):
    pass


# ---------------------------------------------------------------------------
# free energy pieces
# ---------------------------------------------------------------------------

def mixing_derivative(J, chi, mu_over_kT=0.0):
    """d/dJ of ``(J-1) log((J-1)/J) + chi (J-1)/J - mu (J-1)``."""
    J = np.asarray(J, dtype=float)
    return np.log1p(-1.0 / J) + 1.0 / J + chi / J**2 - mu_over_kT


def free_swelling_residual(J, Nv, chi, mu_over_kT=0.0):
    """dW/dJ along the isotropic path ``F = J^(1/3) I``.

    Zero at a stress-free swollen state in contact with solvent at ``mu``.
    """
    J = np.asarray(J, dtype=float)
    return Nv * (J ** (-1.0 / 3.0) - 1.0 / J) + mixing_derivative(J, chi, mu_over_kT)


def isotropic_energy(J, Nv, chi, mu_over_kT=0.0):
    """Free energy per dry volume of the isotropically swollen network."""
    J = np.asarray(J, dtype=float)
    lam2 = J ** (2.0 / 3.0)
    elastic = 0.5 * Nv * (3.0 * lam2 - 3.0 - 2.0 * np.log(J))
    mixing = (J - 1.0) * (np.log1p(-1.0 / J) + chi / J) - mu_over_kT * (J - 1.0)
    return elastic + mixing


def chi_from_state(Nv: float, lambda0: float, mu_over_kT: float = 0.0) -> float:
    """Interaction parameter that makes the stretch ``lambda0`` a free-swelling
    equilibrium.

    ``chi`` enters the stationarity condition linearly, so this is exact.
    """
    if not lambda0 > 1.0:
        raise MaterialError(f"lambda0={lambda0} <= 1: no swollen equilibrium")
    J = lambda0**3
    rest = Nv * (J ** (-1.0 / 3.0) - 1.0 / J) + math.log1p(-1.0 / J) + 1.0 / J - mu_over_kT
    return -rest * J * J


def free_swell_stretch(Nv: float, chi: float, mu_over_kT: float = 0.0,
                       J_max: float = 1.0e3) -> float:
    """Linear free-swelling stretch ``J^(1/3)`` solving the isotropic stationarity.

    When several stationary points exist the one with the lowest free energy
    is returned.
    """
    grid = np.geomspace(1e-10, J_max - 1.0, 4000) + 1.0
    res = free_swelling_residual(grid, Nv, chi, mu_over_kT)
    idx = np.nonzero((res[:-1] < 0.0) & (res[1:] >= 0.0))[0]
    if idx.size == 0:
        raise MaterialError(f"no free-swelling root in J in (1, {J_max}] for Nv={Nv}, chi={chi}")
    roots = [brentq(free_swelling_residual, grid[i], grid[i + 1], args=(Nv, chi, mu_over_kT),
                    xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200) for i in idx]
    energies = [float(isotropic_energy(J, Nv, chi, mu_over_kT)) for J in roots]
    return float(roots[int(np.argmin(energies))] ** (1.0 / 3.0))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HydrogelParams:
    """Constitutive triple plus stress scale for one material in one solvent state.

    Nv:      crosslink density times solvent molecular volume (dimensionless)
    lambda0: free-swelling stretch relative to the dry network
    chi:     Flory interaction parameter
    M:       stress scale kT/v in Pa
    """
    Nv: float
    lambda0: float
    chi: float
    M: float = DEFAULT_M

    def __post_init__(self):
        if not self.Nv > 0:
            raise MaterialError(f"Nv must be positive, got {self.Nv}")
        if not self.lambda0 > 1:
            raise MaterialError(f"lambda0 must exceed 1, got {self.lambda0}")
        if not self.M > 0:
            raise MaterialError(f"M must be positive, got {self.M}")

    @classmethod
    def from_state(cls, Nv: float, lambda0: float, M: float = DEFAULT_M,
                   mu_over_kT: float = 0.0) -> "HydrogelParams":
        return cls(Nv, lambda0, chi_from_state(Nv, lambda0, mu_over_kT), M)

    def stationarity_residual(self, mu_over_kT: float = 0.0) -> float:
        return float(free_swelling_residual(self.lambda0**3, self.Nv, self.chi, mu_over_kT))

    def in_solvent(self, chi: float) -> "HydrogelParams":
        """Same network equilibrated in a solvent with interaction ``chi``."""
        lam = free_swell_stretch(self.Nv, chi)
        return replace(self, lambda0=lam, chi=chi)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# uniaxial compression
# ---------------------------------------------------------------------------

def _axial_stress_dry(l1, l2, Nv, chi):
    """Nominal stress dW/d(lambda1) per dry area, units of M."""
    J = l1 * l2 * l2
    return Nv * (l1 - 1.0 / l1) + l2 * l2 * mixing_derivative(J, chi)


def _lateral_stress_dry(l1, l2, Nv, chi):
    """dW/d(lambda2) per dry area for the equibiaxial lateral stretch, units of M."""
    J = l1 * l2 * l2
    return Nv * (l2 - 1.0 / l2) + l1 * l2 * mixing_derivative(J, chi)


def lateral_stretch(params: HydrogelParams, lambda1_prime: float) -> float:
    """Lateral stretch ``lambda2'`` making the transverse nominal stress vanish."""
    if not lambda1_prime > 0:
        raise MaterialError("lambda1_prime must be positive")
    lam0 = params.lambda0
    l1 = lam0 * lambda1_prime
    lo = 1.0 / math.sqrt(l1) * (1.0 + 1e-12)  # J -> 1+
    f = lambda l2: _lateral_stress_dry(l1, l2, params.Nv, params.chi)
    if not f(lo) < 0:
        raise MaterialError("no lateral equilibrium: transverse stress positive at J -> 1")
    hi = max(lam0, 2.0 * lo)
    for _ in range(60):
        if f(hi) > 0:
            break
        hi *= 2.0
    else:
        raise MaterialError("no lateral equilibrium: root bracket failed")
    l2 = brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=300)
    return l2 / lam0


def forward_stress(params: HydrogelParams, lambda1_prime: float) -> float:
    """Nominal uniaxial stress (Pa, per free-swelling area) at axial stretch
    ``lambda1_prime`` relative to the free-swelling state, lateral faces free."""
    l2p = lateral_stretch(params, lambda1_prime)
    lam0 = params.lambda0
    l1, l2 = lam0 * lambda1_prime, lam0 * l2p
    if l1 * l2 * l2 <= 1.0:
        raise MaterialError("over-compression: J' <= lambda0^-3")
    return float(params.M * _axial_stress_dry(l1, l2, params.Nv, params.chi) / lam0**2)


def _lateral_stretch_many(l1: np.ndarray, Nv: float, chi: float, guess: float) -> np.ndarray:
    """Dry-frame lateral stretches for many axial stretches at once (safeguarded Newton)."""
    lo = (1.0 + 1e-12) / np.sqrt(l1)
    f_lo = _lateral_stress_dry(l1, lo, Nv, chi)
    if np.any(f_lo >= 0):
        raise MaterialError("no lateral equilibrium: transverse stress positive at J -> 1")
    hi = np.maximum(2.0 * lo, np.max(l1))
    for _ in range(60):
        bad = _lateral_stress_dry(l1, hi, Nv, chi) <= 0
        if not bad.any():
            break
        hi = np.where(bad, 2.0 * hi, hi)
    else:
        raise MaterialError("no lateral equilibrium: root bracket failed")
    x = np.clip(guess, lo, hi)
    x = np.where((x > lo) & (x < hi), x, 0.5 * (lo + hi))
    for _ in range(200):
        J = l1 * x * x
        f = _lateral_stress_dry(l1, x, Nv, chi)
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        g = mixing_derivative(J, chi)
        dg = 1.0 / (J * (J - 1.0)) - 1.0 / J**2 - 2.0 * chi / J**3
        df = Nv * (1.0 + 1.0 / (x * x)) + l1 * g + 2.0 * l1 * l1 * x * x * dg
        step = np.where(df > 0, f / np.where(df > 0, df, 1.0), np.inf)
        converged = (np.abs(step) <= 1e-15 * x) | (f == 0.0) | (hi - lo <= 1e-15 * x)
        if converged.all():
            break
        xn = x - step
        outside = ~((xn > lo) & (xn < hi))
        x = np.where(converged, x, np.where(outside, 0.5 * (lo + hi), xn))
    return x


def forward_stress_curve(params: HydrogelParams, lambda1_prime: Iterable[float]) -> np.ndarray:
    """Vectorised :func:`forward_stress` over many axial stretches."""
    l1p = np.asarray(list(lambda1_prime) if not isinstance(lambda1_prime, np.ndarray) else lambda1_prime,
                     dtype=float)
    if np.any(l1p <= 0):
        raise MaterialError("lambda1_prime must be positive")
    lam0 = params.lambda0
    l1 = lam0 * l1p
    l2 = _lateral_stretch_many(l1, params.Nv, params.chi, lam0)
    if np.any(l1 * l2 * l2 <= 1.0):
        raise MaterialError("over-compression: J' <= lambda0^-3")
    return params.M * _axial_stress_dry(l1, l2, params.Nv, params.chi) / lam0**2


def closed_form_lateral(params: HydrogelParams, lambda1_prime: float, sigma1_prime: float) -> float:
    """Lateral stretch from eliminating the mixing term between the axial and
    lateral equilibrium equations:
    ``lambda2'^2 = lambda1'^2 - sigma1' lambda0 lambda1' / (M Nv)``."""
    val = lambda1_prime**2 - sigma1_prime * params.lambda0 * lambda1_prime / (params.M * params.Nv)
    return math.sqrt(val)


def closed_form_stress_residual(Nv: float, lambda0: float, lambda1_prime: float,
                                lambda2_prime: float, sigma1_prime: float, M: float) -> float:
    """LHS minus RHS of the closed-form compression relation (pure-solvent chi)."""
    l1p, l2p = lambda1_prime, lambda2_prime
    lhs = (Nv * (lambda0 * l1p - 1.0 / (lambda0 * l1p))
           + lambda0**2 * l2p**2 * math.log1p(-1.0 / (lambda0**3 * l1p * l2p**2))
           + 1.0 / (lambda0 * l1p)
           - (Nv * (lambda0**2 - 1.0) + lambda0**3 * math.log1p(-1.0 / lambda0**3) + 1.0)
           / (lambda0 * l1p**2 * l2p**2))
    return lhs - lambda0**2 * sigma1_prime / M


@dataclass
class CompressionCurve:
    lambda1_prime: np.ndarray
    sigma1_prime: np.ndarray
    environment: str = "water"
    laser_power: Optional[float] = None

    def __post_init__(self):
        self.lambda1_prime = np.asarray(self.lambda1_prime, dtype=float)
        self.sigma1_prime = np.asarray(self.sigma1_prime, dtype=float)
        if self.lambda1_prime.shape != self.sigma1_prime.shape:
            raise ValueError("stretch and stress arrays differ in length")
        if np.any(self.lambda1_prime > 1.0 + 1e-12):
            raise ValueError("compression curve stretches must be <= 1")
        if np.any(np.diff(self.lambda1_prime) >= 0):
            raise ValueError("compression stretches must be strictly decreasing")

    def __len__(self):
        return self.lambda1_prime.size

    @classmethod
    def from_csv(cls, path, environment: str = "water",
                 laser_power: Optional[float] = None) -> "CompressionCurve":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = [(float(r["lambda1_prime"]), float(r["sigma1_prime_Pa"])) for r in reader]
        lam, sig = zip(*rows)
        return cls(np.array(lam), np.array(sig), environment, laser_power)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda1_prime", "sigma1_prime_Pa"])
            for l, s in zip(self.lambda1_prime, self.sigma1_prime):
                w.writerow([repr(float(l)), repr(float(s))])


@dataclass
class CompressionFit:
    params: HydrogelParams
    rms_residual: float  # Pa
    converged: bool
    n_iter: int
    message: str = ""


NV_BOUNDS = (1e-6, 2.0)
LAMBDA0_BOUNDS = (1.0 + 1e-6, 5.0)


def fit_compression(curve: CompressionCurve, M: float = DEFAULT_M,
                    initial_guess: Sequence[float] = (0.1, 1.5),
                    max_iter: int = 100) -> CompressionFit:
    """Least-squares recovery of ``(Nv, lambda0)`` from a compression curve.

    The guess is run through the bounded LM solver.  Two perturbed restarts
    follow only when that run fails to converge or ends on a bound; the
    lowest-cost result wins.  ``chi`` is then fixed by
    free-swelling stationarity in pure solvent.
    """
    if len(curve) < 5:
        raise IllPosedFitError("need at least 5 samples")
    if not M > 0:
        raise MaterialError("M must be positive")
    sig = curve.sigma1_prime
    if np.max(np.abs(sig)) <= 1e-9 * M:
        raise IllPosedFitError("all stresses ~0: curve carries no stiffness information")
    lam = curve.lambda1_prime
    scale = max(np.max(np.abs(sig)), 1e-300)

    def residual(x):
        try:
            p = HydrogelParams.from_state(x[0], x[1], M)
            return (forward_stress_curve(p, lam) - sig) / scale
        except MaterialError:
            return np.full(lam.size, 1e3)

    lo = np.array([NV_BOUNDS[0], LAMBDA0_BOUNDS[0]])
    hi = np.array([NV_BOUNDS[1], LAMBDA0_BOUNDS[1]])
    nv0, l0 = initial_guess
    seeds = [(nv0, l0), (0.5 * nv0, 1.0 + 1.3 * (l0 - 1.0)), (2.0 * nv0, 1.0 + 0.7 * (l0 - 1.0))]
    best = None
    for s in seeds:
        x0 = np.clip(np.array(s, dtype=float), lo, hi)
        res = levmar(residual, x0, lo, hi, max_iter=max_iter)
        if best is None or res.cost < best.cost:
            best = res
        on_bound = np.any(np.isclose(best.x, lo, rtol=1e-9) | np.isclose(best.x, hi, rtol=1e-9))
        if best.converged and not on_bound:
            break
    params = HydrogelParams.from_state(best.x[0], best.x[1], M)
    rms = math.sqrt(2.0 * best.cost / lam.size) * scale
    return CompressionFit(params, rms, best.converged, best.n_iter, best.message)


# ---------------------------------------------------------------------------
# laser power trends
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerTrend:
    """``p(LP) = a + b exp(-c LP)`` on the fitted power range (mW)."""
    a: float
    b: float
    c: float
    lp_min: float
    lp_max: float
    saturating: bool = True

    def __call__(self, lp):
        return eval_power_trend(self, lp)

    def to_dict(self) -> dict:
        return asdict(self)


def _trend_linear_part(c, lp, y):
    basis = np.column_stack([np.ones_like(lp), np.exp(-c * lp)])
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    r = basis @ coef - y
    return coef, float(r @ r)


def fit_power_trend(points: Sequence[tuple[float, float]]) -> PowerTrend:
    """Fit a saturating exponential to (laser power, value) pairs.

    ``c`` is found by variable projection (``a``, ``b`` are linear given ``c``)
    and then polished jointly.  A best ``c <= 0`` marks the trend non-saturating.
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] < 4:
        raise ValueError("need at least 4 points")
    lp, y = pts[:, 0], pts[:, 1]
    span = float(lp.max() - lp.min())
    if span <= 0:
        raise ValueError("points must span a power range")
    if np.ptp(y) <= 1e-14 * max(1.0, np.max(np.abs(y))):
        return PowerTrend(float(np.mean(y)), 0.0, 1.0 / span, float(lp.min()), float(lp.max()))

    lp_ref = float(lp.min())
    x = lp - lp_ref  # well-conditioned exponent
    cs = np.concatenate([-np.geomspace(20.0, 1e-3, 200), np.geomspace(1e-3, 20.0, 400)]) / span
    costs = [_trend_linear_part(c, x, y)[1] for c in cs]
    c0 = cs[int(np.argmin(costs))]
    (a0, b0), _ = _trend_linear_part(c0, x, y)

    def resid(p):
        return p[0] + p[1] * np.exp(-p[2] * x) - y

    res = levmar(resid, np.array([a0, b0, c0]), max_iter=200)
    a, b_shift, c = res.x
    b = b_shift * math.exp(c * lp_ref)
    return PowerTrend(float(a), float(b), float(c), float(lp.min()), float(lp.max()), bool(c > 0))


def eval_power_trend(trend: PowerTrend, lp):
    """Evaluate a trend, clamping the power to the fitted range."""
    lp_arr = np.asarray(lp, dtype=float)
    if np.any(lp_arr < trend.lp_min) or np.any(lp_arr > trend.lp_max):
        warnings.warn(f"laser power {lp} outside fitted range "
                      f"[{trend.lp_min}, {trend.lp_max}] mW; clamped", stacklevel=2)
    lp_c = np.clip(lp_arr, trend.lp_min, trend.lp_max)
    val = trend.a + trend.b * np.exp(-trend.c * lp_c)
    return float(val) if np.ndim(val) == 0 else val


def predict_deswelling(params_design: HydrogelParams, params_env: HydrogelParams) -> float:
    """Linear size ratio of the network in the environment to its designed size."""
    if not math.isclose(params_design.Nv, params_env.Nv, rel_tol=1e-12):
        raise MaterialError("design and environment parameters must share Nv")
    lam_design = free_swell_stretch(params_design.Nv, params_design.chi)
    lam_env = free_swell_stretch(params_env.Nv, params_env.chi)
    if not 1.0 < lam_env <= 10.0:
        raise MaterialError("no equilibrium root in (1, 10]")
    return lam_env / lam_design


# ---------------------------------------------------------------------------
# recipe calibration: laser power -> parameters per solvent
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecipeCalibration:
    """Laser power trends of one print recipe.

    ``nv`` and ``lambda0`` are fitted from compression tests in the
    characterisation solvent; ``deswelling`` maps solvent name to the trend of
    linear size in that solvent over the as-designed size.
    """
    name: str
    nv: PowerTrend
    lambda0: PowerTrend
    deswelling: dict
    characterization_solvent: str = "water"
    M: float = DEFAULT_M

    def design_stretch(self, lp: float) -> float:
        lam_char = eval_power_trend(self.lambda0, lp)
        return lam_char / eval_power_trend(self.deswelling[self.characterization_solvent], lp)

    def params(self, lp: float, solvent: str = "design") -> HydrogelParams:
        """Parameters of the network printed at ``lp`` equilibrated in ``solvent``.

        ``solvent='design'`` gives the as-printed state used as the mesh reference.
        """
        nv = eval_power_trend(self.nv, lp)
        lam = self.design_stretch(lp)
        if solvent != "design":
            lam *= eval_power_trend(self.deswelling[solvent], lp)
        return HydrogelParams.from_state(nv, lam, self.M)

    def to_dict(self) -> dict:
        return {"name": self.name, "nv": self.nv.to_dict(), "lambda0": self.lambda0.to_dict(),
                "deswelling": {k: v.to_dict() for k, v in self.deswelling.items()},
                "characterization_solvent": self.characterization_solvent, "M": self.M}

    @classmethod
    def from_dict(cls, d: dict) -> "RecipeCalibration":
        return cls(d["name"], PowerTrend(**d["nv"]), PowerTrend(**d["lambda0"]),
                   {k: PowerTrend(**v) for k, v in d["deswelling"].items()},
                   d.get("characterization_solvent", "water"), d.get("M", DEFAULT_M))


def save_params_table(path, table: dict) -> None:
    """Write fitted parameters keyed by (laser power mW, solvent) as JSON."""
    out = {f"{float(lp):g}/{solvent}": p.to_dict() for (lp, solvent), p in sorted(table.items())}
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


def load_params_table(path) -> dict:
    raw = json.loads(Path(path).read_text())
    table = {}
    for key, val in raw.items():
        lp, solvent = key.split("/", 1)
        table[(float(lp), solvent)] = HydrogelParams(**val)
    return table
