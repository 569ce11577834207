"""Synchronous rotation of a magnetised rigid body in a rotating field.

Conventions: the field rotates about the lab axis ``e_z`` with angular
velocity ``omega = 2 pi f * sense``.  In a synchronous state the body spins
rigidly about that axis, whose body-frame image is the unit vector ``n``;
the body-frame field ``b`` is then constant, perpendicular to ``n``.  With no
net external force the body angular velocity is ``F_rot (m x b)``, so
synchrony requires

    m x b = omega F_rot^-1 n,  b . n = 0,  |b| = B.

Torque units: the moment is stored in A m^2 and the field in mT, their cross
product is converted with ``TORQUE_PN_UM_PER_AM2_MT`` (1 A m^2 mT = 1e-3 N m =
1e15 pN um).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .hydro import MPAS_TO_PN_S_PER_UM2, RigidBodyMobility, skew

log = logging.getLogger(__name__)

EMU_TO_AM2 = 1e-3
TORQUE_PN_UM_PER_AM2_MT = 1e15
MEASURED_MOMENT_EMU = 2.8e-6
MOMENT_SCALE_FACTOR = 10.0


@dataclass(frozen=True)
class Fluid:
    name: str
    density: float  # kg/m^3
    viscosity: float  # mPa s


WATER = Fluid("water", 997.0, 0.89)
IPA = Fluid("ipa", 786.0, 2.2)
FLUIDS = {"water": WATER, "ipa": IPA}


def magnetic_torque(moment, field_mT) -> np.ndarray:
    """Dipole torque ``m x B`` in pN um for ``m`` in A m^2 and ``B`` in mT."""
    return TORQUE_PN_UM_PER_AM2_MT * np.cross(np.asarray(moment, float), np.asarray(field_mT, float))


@dataclass
class MagneticBody:
    mobility: RigidBodyMobility  # body frame
    moment: np.ndarray  # A m^2, body frame
    easy_axis: np.ndarray  # unit, body frame (helix axis)
    length: float  # characteristic length for the dimensionless velocity form, um
    viscosity: float = 1.0  # mPa s, used to make the mobility dimensionless
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.moment = np.asarray(self.moment, float)
        self.easy_axis = np.asarray(self.easy_axis, float)
        if not np.linalg.norm(self.moment) > 0:
            raise ValueError("magnetic moment must be non-zero")
        nrm = np.linalg.norm(self.easy_axis)
        if not nrm > 0:
            raise ValueError("easy axis must be non-zero")
        self.easy_axis = self.easy_axis / nrm
        if not self.length > 0:
            raise ValueError("characteristic length must be positive")

    @classmethod
    def from_emu(cls, mobility: RigidBodyMobility, direction, easy_axis, length: float,
                 measured_emu: float = MEASURED_MOMENT_EMU, scale_by_ten: bool = True,
                 viscosity: float = 1.0) -> "MagneticBody":
        """Body with moment along ``direction``; the measured moment is divided by
        ten when ``scale_by_ten`` is set, and the measured value kept in metadata."""
        d = np.asarray(direction, float)
        d = d / np.linalg.norm(d)
        emu = measured_emu / MOMENT_SCALE_FACTOR if scale_by_ten else measured_emu
        meta = {"measured_moment_emu": measured_emu, "moment_emu": emu, "scale_by_ten": scale_by_ten}
        return cls(mobility, emu * EMU_TO_AM2 * d, easy_axis, length, viscosity, meta)

    @property
    def moment_emu(self) -> float:
        return float(np.linalg.norm(self.moment)) / EMU_TO_AM2

    def mirror(self, normal=(0.0, 0.0, 1.0)) -> "MagneticBody":
        """Reflected body: polar blocks map as ``P X P``, the coupling and the
        (pseudo-vector) moment pick up an extra sign."""
        nv = np.asarray(normal, float) / np.linalg.norm(normal)
        P = np.eye(3) - 2 * np.outer(nv, nv)
        mob = self.mobility
        mirrored = RigidBodyMobility(P @ mob.A @ P, -P @ mob.G @ P, P @ mob.F_rot @ P,
                                     P @ mob.reference, mob.collinear)
        return MagneticBody(mirrored, -P @ self.moment, P @ self.easy_axis, self.length,
                            self.viscosity, dict(self.metadata))

    def with_mobility(self, mobility: RigidBodyMobility) -> "MagneticBody":
        return MagneticBody(mobility, self.moment, self.easy_axis, self.length, self.viscosity,
                            dict(self.metadata))


@dataclass
class FieldProgram:
    frequencies: np.ndarray  # Hz
    axis: tuple = (0.0, 0.0, 1.0)  # lab rotation axis (the lab z by convention)
    sense: int = 1
    B_low: float = 5.0  # mT
    B_high: float = 2.9  # mT at f_high
    f_knee: float = 50.0  # Hz, droop starts here
    f_high: float = 200.0  # Hz
    schedule: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, float)
        if np.any(self.frequencies <= 0):
            raise ValueError("frequencies must be positive")
        if self.sense not in (1, -1):
            raise ValueError("sense must be +1 or -1")
        for f in self.frequencies:
            if not self.B(f) > 0:
                raise ValueError(f"field magnitude must be positive at {f} Hz")

    @classmethod
    def constant(cls, B: float, frequencies, sense: int = 1) -> "FieldProgram":
        return cls(frequencies, sense=sense, B_low=B, B_high=B)

    def B(self, f: float) -> float:
        """Field magnitude in mT at frequency ``f``: flat, a linear droop, then
        held at ``B_high`` above ``f_high``."""
        if self.schedule is not None:
            return float(self.schedule(f))
        if f <= self.f_knee:
            return self.B_low
        if f >= self.f_high:
            return self.B_high
        slope = (self.B_high - self.B_low) / (self.f_high - self.f_knee)
        return self.B_low + slope * (f - self.f_knee)

    def to_dict(self) -> dict:
        return {"frequencies": self.frequencies.tolist(), "axis": list(self.axis), "sense": self.sense,
                "B_low": self.B_low, "B_high": self.B_high, "f_knee": self.f_knee,
                "f_high": self.f_high}


@dataclass
class SyncState:
    feasible: bool
    n: Optional[np.ndarray] = None  # body-frame rotation axis
    b: Optional[np.ndarray] = None  # body-frame field, mT
    phase_lag: float = float("nan")  # rad, m behind b about n
    precession: float = float("nan")  # deg between n and the easy axis
    torque: Optional[np.ndarray] = None  # pN um, body frame
    omega: float = 0.0  # rad/s, signed by the rotation sense
    n_roots: int = 0
    n_stable: int = 0


def _circle_basis(w: np.ndarray):
    w = w / np.linalg.norm(w)
    trial = np.eye(3)[np.argmin(np.abs(w))]
    p = trial - (trial @ w) * w
    p /= np.linalg.norm(p)
    return p, np.cross(w, p)


class _SyncGeometry:
    """Frequency-independent pieces of the synchrony problem."""

    def __init__(self, body: MagneticBody, grid: int = 720):
        self.Fr = body.mobility.F_rot
        self.Finv = np.linalg.inv(self.Fr)
        self.m = TORQUE_PN_UM_PER_AM2_MT * body.moment  # pN um per mT
        self.m2 = float(self.m @ self.m)
        w = self.Finv @ self.m
        self.p, self.q = _circle_basis(w)
        self.degenerate = abs(w @ self.m) >= (1 - 1e-12) * np.linalg.norm(w) * math.sqrt(self.m2)
        self.grid = np.linspace(0.0, 2 * math.pi, grid, endpoint=False)
        self._minima = None

    def n_of(self, phi):
        return math.cos(phi) * self.p + math.sin(phi) * self.q

    def parts(self, phi):
        """Numerator and ``(m.n)^2 |m|^2`` with ``h = num / den``."""
        n = self.n_of(phi)
        Fn = self.Finv @ n
        mn = float(self.m @ n)
        cross = float(np.cross(Fn, self.m) @ n)
        num = float(Fn @ Fn) * mn * mn + cross * cross
        return num, mn * mn * self.m2

    def h(self, phi):
        num, den = self.parts(phi)
        return num / den if den > 0 else math.inf

    def minima(self):
        """Local minima of h as (phi, h), refined."""
        if self._minima is not None:
            return self._minima
        hv = np.array([self.h(p) for p in self.grid])
        k = len(hv)
        out = []
        for i in range(k):
            if hv[i] <= hv[i - 1] and hv[i] <= hv[(i + 1) % k] and np.isfinite(hv[i]):
                step = self.grid[1] - self.grid[0]
                res = minimize_scalar(self.h, bounds=(self.grid[i] - step, self.grid[i] + step),
                                      method="bounded", options={"xatol": 1e-13})
                phi = float(np.mod(res.x, 2 * math.pi))
                out.append((phi, min(float(res.fun), float(hv[i]))))
        self._minima = out
        return out

    def field_for(self, phi, omega):
        n = self.n_of(phi)
        T = omega * (self.Finv @ n)
        s = -float(np.cross(T, self.m) @ n) / (self.m2 * float(self.m @ n))
        b = np.cross(T, self.m) / self.m2 + s * self.m
        return n, b, T


def _rhs(y, body_Fr, m, omega):
    n, b = y[:3], y[3:]
    Om = body_Fr @ np.cross(m, b)
    return np.concatenate([np.cross(n, Om), omega * np.cross(n, b) + np.cross(b, Om)])


def _is_stable(geo: _SyncGeometry, n, b, omega) -> bool:
    y0 = np.concatenate([n, b])
    J = np.empty((6, 6))
    scale = np.concatenate([np.ones(3), np.full(3, max(np.linalg.norm(b), 1e-300))])
    for k in range(6):
        h = 1e-6 * scale[k]
        yp, ym = y0.copy(), y0.copy()
        yp[k] += h
        ym[k] -= h
        J[:, k] = (_rhs(yp, geo.Fr, geo.m, omega) - _rhs(ym, geo.Fr, geo.m, omega)) / (2 * h)
    # tangent space of {|n| = 1, |b| = B, n.b = 0}: joint infinitesimal rotations
    V = np.vstack([-skew(n), -skew(b)])  # columns: e_k x n, e_k x b
    reduced = np.linalg.lstsq(V, J @ V, rcond=None)[0]
    eig = np.linalg.eigvals(reduced)
    tol = 1e-9 * max(np.max(np.abs(eig)), 1e-300)
    return bool(np.all(eig.real < -tol))


def _phase_lag(n, b, m) -> float:
    mp = m - (m @ n) * n
    if np.linalg.norm(mp) == 0 or np.linalg.norm(b) == 0:
        return 0.0
    return math.atan2(float(np.cross(mp, b) @ n), float(mp @ b))


def _precession(n, easy) -> float:
    return math.degrees(math.acos(min(1.0, abs(float(n @ easy)))))


def solve_sync(body: MagneticBody, B_mag: float, f: float, sense: int = 1,
               geometry: Optional[_SyncGeometry] = None) -> SyncState:
    """Steady synchronous state at field magnitude ``B_mag`` (mT) and frequency ``f`` (Hz)."""
    if not f > 0:
        raise ValueError("frequency must be positive")
    geo = geometry or _SyncGeometry(body)
    omega = 2 * math.pi * f * sense
    target = B_mag * B_mag
    if geo.degenerate:
        return _solve_degenerate(geo, body, B_mag, omega)

    def H(phi):
        num, den = geo.parts(phi)
        return omega * omega * num - target * den

    # H >= 0 where m.n = 0; at low frequency the positive lobes around these
    # points are narrower than the grid, so they are added as nodes
    phi0 = math.atan2(-float(geo.m @ geo.p), float(geo.m @ geo.q))
    lobes = np.mod([phi0, phi0 + math.pi], 2 * math.pi)
    nodes = np.unique(np.concatenate([geo.grid, [p for p, _ in geo.minima()], lobes, [2 * math.pi]]))
    vals = np.array([H(p) for p in nodes])
    roots = []
    for i in range(len(nodes) - 1):
        a, c = vals[i], vals[i + 1]
        if a == 0.0:
            roots.append(nodes[i])
        elif a * c < 0:
            roots.append(brentq(H, nodes[i], nodes[i + 1], xtol=1e-15, rtol=1e-15))
    candidates = []
    for phi in roots:
        n, b, T = geo.field_for(phi, omega)
        if not np.all(np.isfinite(b)):
            continue
        stable = _is_stable(geo, n, b, omega)
        candidates.append((stable, abs(_phase_lag(n, b, geo.m)), phi, n, b, T))
    stable = [c for c in candidates if c[0]]
    if not stable:
        return SyncState(False, omega=omega, n_roots=len(candidates))
    stable.sort(key=lambda c: (round(c[1], 12), c[2]))
    if len(stable) > 1:
        log.debug("%d stable synchronous states at f=%g Hz", len(stable), f)
    _, _, phi, n, b, T = stable[0]
    return SyncState(True, n, b, _phase_lag(n, b, geo.m), _precession(n, body.easy_axis), T,
                     omega, len(candidates), len(stable))


def _solve_degenerate(geo, body, B_mag, omega) -> SyncState:
    # rotational mobility leaves every axis on the circle equivalent; take phi = 0
    n = geo.n_of(0.0)
    T = omega * (geo.Finv @ n)
    rest = B_mag**2 - float(T @ T) / geo.m2
    if rest < 0:
        return SyncState(False, omega=omega)
    b = np.cross(T, geo.m) / geo.m2 + math.sqrt(rest / geo.m2) * geo.m
    return SyncState(True, n, b, _phase_lag(n, b, geo.m), _precession(n, body.easy_axis), T,
                     omega, 1, 1)


def kinematic_velocity(body: MagneticBody, sync: SyncState) -> np.ndarray:
    """Body-frame translational velocity (um/s) from the applied magnetic torque."""
    tau = np.cross(body_moment_pn(body), sync.b)
    return body.mobility.G.T @ tau


def body_moment_pn(body: MagneticBody) -> np.ndarray:
    return TORQUE_PN_UM_PER_AM2_MT * body.moment


def forward_velocity(body: MagneticBody, sync: SyncState, f: Optional[float] = None,
                     check: bool = True) -> float:
    """Velocity along the lab rotation axis (um/s).

    Evaluated from the dimensionless coupling form, with mobilities scaled by
    the viscosity and the characteristic length, and cross-checked against
    the direct torque-to-velocity map.
    """
    if not sync.feasible:
        raise ValueError("no synchronous state")
    omega = sync.omega if f is None else 2 * math.pi * f * np.sign(sync.omega)
    eta = body.viscosity * MPAS_TO_PN_S_PER_UM2
    ell = body.length
    coupling = body.mobility.G.T * eta * ell**2  # torque -> translation, dimensionless
    rot = body.mobility.F_rot * eta * ell**3
    Om = sync.n  # angular velocity over omega
    u_dimless = float(Om @ coupling @ np.linalg.solve(rot, Om))
    u_z = u_dimless * omega * ell
    if check:
        u_kin = float(kinematic_velocity(body, sync) @ sync.n)
        if abs(u_kin - u_z) > 1e-6 * max(abs(u_z), abs(u_kin), 1e-300):
            log.warning("velocity routes disagree: %g vs %g", u_z, u_kin)
    return u_z


def _feasible(body, program: FieldProgram, f, geo) -> bool:
    return solve_sync(body, program.B(f), f, program.sense, geo).feasible


def step_out_frequency(body: MagneticBody, program: FieldProgram, tol: float = 0.1,
                       geometry: Optional[_SyncGeometry] = None) -> Optional[float]:
    """Highest synchronous frequency within the program's range, or None when the
    body stays synchronous up to the top of the range."""
    geo = geometry or _SyncGeometry(body)
    f_lo, f_hi = float(np.min(program.frequencies)), float(np.max(program.frequencies))
    if not _feasible(body, program, f_lo, geo):
        raise ValueError(f"not synchronous at the lowest frequency {f_lo} Hz")
    if _feasible(body, program, f_hi, geo):
        return None
    while f_hi - f_lo > tol:
        mid = 0.5 * (f_lo + f_hi)
        if _feasible(body, program, mid, geo):
            f_lo = mid
        else:
            f_hi = mid
    # polish: at step-out the field just reaches omega * sqrt(h) at a minimum of h
    best = None
    if geo.degenerate:
        n = geo.n_of(0.0)
        hmins = [float((geo.Finv @ n) @ (geo.Finv @ n)) / geo.m2]
    else:
        hmins = [h for _, h in geo.minima()]
    for hmin in hmins:
        def g(f, hmin=hmin):
            return 2 * math.pi * f * math.sqrt(hmin) - program.B(f)
        a, c = f_lo - 2 * tol, f_hi + 2 * tol
        a = max(a, 1e-12)
        if g(a) < 0 < g(c):
            root = brentq(g, a, c, xtol=1e-14, rtol=1e-15)
            if best is None or abs(root - 0.5 * (f_lo + f_hi)) < abs(best - 0.5 * (f_lo + f_hi)):
                best = root
    return best if best is not None else 0.5 * (f_lo + f_hi)


@dataclass
class FrequencyResponse:
    frequencies: np.ndarray
    u_z: np.ndarray  # um/s, nan where not synchronous
    precession: np.ndarray  # deg
    feasible: np.ndarray
    step_out: Optional[float]
    monotone_violations: list = field(default_factory=list)

    @property
    def max_speed(self) -> float:
        ok = self.feasible & np.isfinite(self.u_z)
        return float(np.max(np.abs(self.u_z[ok]))) if np.any(ok) else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["f_hz", "u_z_um_s", "precession_deg", "feasible"])
            for f, u, p, ok in zip(self.frequencies, self.u_z, self.precession, self.feasible):
                w.writerow([f"{f:.10g}", f"{u:.10g}", f"{p:.10g}", int(bool(ok))])

    @classmethod
    def from_csv(cls, path) -> "FrequencyResponse":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        get = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        return cls(get("f_hz"), get("u_z_um_s"), get("precession_deg"),
                   get("feasible").astype(bool), None)

    def to_dict(self) -> dict:
        clean = lambda a: [None if not np.isfinite(v) else float(v) for v in a]  # noqa: E731
        return {"f_hz": clean(self.frequencies), "u_z_um_s": clean(self.u_z),
                "precession_deg": clean(self.precession),
                "feasible": [bool(v) for v in self.feasible], "step_out_hz": self.step_out,
                "max_speed_um_s": self.max_speed, "monotone_violations": self.monotone_violations}


def frequency_response(body: MagneticBody, program: FieldProgram) -> FrequencyResponse:
    geo = _SyncGeometry(body)
    freqs = np.sort(program.frequencies)
    u = np.full(len(freqs), np.nan)
    prec = np.full(len(freqs), np.nan)
    ok = np.zeros(len(freqs), bool)
    for i, f in enumerate(freqs):
        s = solve_sync(body, program.B(f), f, program.sense, geo)
        ok[i] = s.feasible
        if s.feasible:
            u[i] = forward_velocity(body, s, f)
            prec[i] = s.precession
    violations = [float(f) for f, a, b in zip(freqs[1:], ok[:-1], ok[1:]) if b and not a]
    if violations:
        log.warning("synchrony regained above a step-out at %s Hz", violations)
    f_so = None
    if ok[0] and not ok[-1]:
        f_so = step_out_frequency(body, program, geometry=geo)
    return FrequencyResponse(freqs, u, prec, ok, f_so, violations)


def reynolds_estimate(D: float, f: float, fluid: Fluid) -> float:
    """Reynolds number with the tip speed ``pi D f`` as velocity scale; D in um."""
    if D < 0 or f < 0:
        raise ValueError("D and f must be non-negative")
    d_m = D * 1e-6
    return fluid.density * math.pi * d_m * f * d_m / (fluid.viscosity * 1e-3)
