"""Helix descriptors: closed-form relations, centerline extraction and fitting.

Convention: a helix about unit axis ``a`` through ``axis_point`` is

    p(phi) = axis_point + R (cos phi e1 + sin phi e2) + rise * phi * a,

with ``e2 = a x e1``.  ``rise > 0`` is right-handed.  The filament always
advances along ``+a``: ``phi`` runs from 0 to ``2 pi n`` for right-handed
helices and from 0 to ``-2 pi n`` for left-handed ones.  The pitch is
``P = 2 pi |rise|`` and the helix angle (between the tangent and the axis) is
``alpha = arctan(pi D / P)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .fitting import levmar

RING_PITCH_RATIO = 0.05  # P / (pi D) below this is reported as a ring or tube


class HelixFitError(ValueError):
    pass


def helix_angle(D: float, P: float) -> float:
    """Helix angle in degrees, ``arctan(pi D / P)``; 90 for a ring."""
    if not D > 0:
        raise ValueError("D must be positive")
    if P < 0:
        raise ValueError("P must be non-negative")
    return math.degrees(math.atan2(math.pi * D, P))


def helix_turns(L: float, D: float, P: float) -> float:
    """Number of turns of a filament of arc length ``L``."""
    if not L > 0:
        raise ValueError("L must be positive")
    if D == 0 and P == 0:
        raise ValueError("D and P cannot both vanish")
    return L / math.hypot(math.pi * D, P)


@dataclass
class HelixParams:
    D: float
    P: float
    alpha: float
    n: float
    handedness: str  # "right" or "left"
    axis: tuple
    axis_point: tuple
    start_direction: tuple  # unit vector from the axis to the first point
    length: float  # arc length of the fitted helix segment
    residual: float = 0.0
    ring: bool = False
    low_confidence: bool = False

    def __post_init__(self):
        if self.handedness not in ("right", "left"):
            raise ValueError("handedness must be 'right' or 'left'")
        self.axis = tuple(float(v) for v in self.axis)
        self.axis_point = tuple(float(v) for v in self.axis_point)
        self.start_direction = tuple(float(v) for v in self.start_direction)
        for name in ("D", "P", "alpha", "n", "length", "residual"):
            setattr(self, name, float(getattr(self, name)))
        self.ring = bool(self.ring)
        self.low_confidence = bool(self.low_confidence)

    @classmethod
    def from_shape(cls, D: float, P: float, n: float, handedness: str = "right",
                   axis=(0.0, 0.0, 1.0), axis_point=(0.0, 0.0, 0.0), start_direction=None):
        a = np.asarray(axis, float)
        a = a / np.linalg.norm(a)
        if start_direction is None:
            trial = np.eye(3)[np.argmin(np.abs(a))]
            e1 = trial - (trial @ a) * a
        else:
            e1 = np.asarray(start_direction, float) - (np.asarray(start_direction, float) @ a) * a
        e1 /= np.linalg.norm(e1)
        length = n * math.hypot(math.pi * D, P)
        return cls(D, P, helix_angle(D, P), n, handedness, tuple(a), tuple(axis_point), tuple(e1),
                   length, ring=P < RING_PITCH_RATIO * math.pi * D)

    @property
    def radius(self) -> float:
        return 0.5 * self.D

    @property
    def rise(self) -> float:
        s = 1.0 if self.handedness == "right" else -1.0
        return s * self.P / (2 * math.pi)

    @property
    def phase_end(self) -> float:
        """Signed phase at the far end of the filament."""
        s = 1.0 if self.handedness == "right" else -1.0
        return s * 2 * math.pi * self.n

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HelixParams":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "HelixParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _frame(axis: np.ndarray, start: np.ndarray):
    a = axis / np.linalg.norm(axis)
    e1 = start - (start @ a) * a
    e1 /= np.linalg.norm(e1)
    return a, e1, np.cross(a, e1)


def parametric_helix(helix: HelixParams, samples: Optional[int] = None,
                     tube_radius: Optional[float] = None) -> np.ndarray:
    """Centerline points uniformly spaced in arc length.

    Either give ``samples`` directly or a ``tube_radius``, in which case points
    are spaced by about one tube radius.
    """
    if samples is None:
        if tube_radius is None or tube_radius <= 0:
            raise ValueError("give samples or a positive tube_radius")
        samples = int(math.ceil(helix.length / tube_radius)) + 1
    if samples < 2:
        raise ValueError("need at least 2 samples")
    a, e1, e2 = _frame(np.asarray(helix.axis), np.asarray(helix.start_direction))
    phi = np.linspace(0.0, helix.phase_end, samples)
    R = helix.radius
    return (np.asarray(helix.axis_point) + R * np.outer(np.cos(phi), e1)
            + R * np.outer(np.sin(phi), e2) + np.outer(helix.rise * phi, a))


def polyline_length(points: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _circle_fit(xy: np.ndarray):
    """Algebraic least-squares circle: returns centre and radius."""
    A = np.column_stack([2 * xy, np.ones(len(xy))])
    b = np.sum(xy**2, axis=1)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    c = sol[:2]
    return c, math.sqrt(max(sol[2] + c @ c, 0.0))


def _perp_basis(a: np.ndarray):
    trial = np.eye(3)[np.argmin(np.abs(a))]
    u = trial - (trial @ a) * a
    u /= np.linalg.norm(u)
    return u, np.cross(a, u)


def _unwrapped_angles(points, a, centre, e1, e2):
    rel = points - centre
    return np.unwrap(np.arctan2(rel @ e2, rel @ e1))


def _axis_candidates(points: np.ndarray) -> list:
    centred = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    cands = [vt[0], vt[2]]
    # curvature vectors point at the axis, so the axis is normal to them
    n = len(points)
    for stride in {max(1, n // 40), max(1, n // 12)}:
        if n > 2 * stride:
            dd = points[2 * stride:] - 2 * points[stride:-stride] + points[:-2 * stride]
            _, _, vt2 = np.linalg.svd(dd, full_matrices=False)
            cands.append(vt2[2])
    return cands


def _initial_guess(points, a):
    u, v = _perp_basis(a)
    xy = np.column_stack([points @ u, points @ v])
    c2, R = _circle_fit(xy)
    centre = c2[0] * u + c2[1] * v
    phi = _unwrapped_angles(points, a, centre, u, v)
    phi = phi - phi[0]
    z = points @ a
    A = np.column_stack([phi, np.ones_like(phi)])
    (rise, z0), *_ = np.linalg.lstsq(A, z, rcond=None)
    return centre + z0 * a, R, rise


def _fit_from_axis(points, a0, max_iter: int = 300):
    u0, v0 = _perp_basis(a0)
    p0, R0, rise0 = _initial_guess(points, a0)
    scale = max(R0, 1e-12)

    def unpack(x):
        a = a0 + x[0] * u0 + x[1] * v0
        a = a / np.linalg.norm(a)
        base = p0 + scale * (x[2] * u0 + x[3] * v0)
        return a, base, x[4] * scale, x[5] * scale, x[6] * scale

    def resid(x):
        a, base, R, rise, z0 = unpack(x)
        e1 = u0 - (u0 @ a) * a
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(a, e1)
        rel = points - base
        axial = rel @ a
        radial_vec = rel - np.outer(axial, a)
        rho = np.linalg.norm(radial_vec, axis=1)
        phi = np.unwrap(np.arctan2(rel @ e2, rel @ e1))
        phi = phi - phi[0]
        return np.concatenate([rho - R, axial - z0 - rise * phi]) / scale

    x0 = np.array([0.0, 0.0, 0.0, 0.0, 1.0, rise0 / scale, 0.0])
    res = levmar(resid, x0, max_iter=max_iter, xtol=1e-15, gtol=1e-20, ftol=1e-13)
    a, base, R, rise, z0 = unpack(res.x)
    return a, base + z0 * a, abs(R), rise, res


def fit_helix(polyline, min_points: int = 20) -> HelixParams:
    """Least-squares helix through an ordered polyline."""
    pts = np.asarray(polyline, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise HelixFitError("need an (n >= 3, 3) array of points")
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] == 0 or sv[1] < 1e-9 * sv[0]:
        raise HelixFitError("points are collinear: straight filament, D = 0")

    # screen the axis initialisations briefly, then refine the best one
    best = None
    for cand in _axis_candidates(pts):
        try:
            fit = _fit_from_axis(pts, cand / np.linalg.norm(cand), max_iter=25)
        except (FloatingPointError, np.linalg.LinAlgError):
            continue
        if best is None or fit[-1].cost < best[-1].cost:
            best = fit
    if best is None:
        raise HelixFitError("helix fit failed for every axis initialisation")
    try:
        refined = _fit_from_axis(pts, best[0])
        if refined[-1].cost <= best[-1].cost:
            best = refined
    except (FloatingPointError, np.linalg.LinAlgError):
        pass
    a, base, R, rise, res = best

    # orient the axis so the filament advances along +axis (or turns positively for rings)
    e1, e2 = _perp_basis(a)
    phi = _unwrapped_angles(pts, a, base, e1, e2)
    advance = (pts[-1] - pts[0]) @ a
    if abs(advance) > 1e-9 * R * abs(phi[-1] - phi[0]):
        flip = advance < 0
    else:
        flip = phi[-1] < phi[0]
    if flip:
        a = -a
        e1, e2 = _perp_basis(a)
        phi = _unwrapped_angles(pts, a, base, e1, e2)
    # rise is invariant under axis reversal; recompute in the final frame
    z = (pts - base) @ a
    sweep = abs(phi[-1] - phi[0])
    axial_at_start = z[0]
    axis_point = base + axial_at_start * a
    start = pts[0] - axis_point
    start = start - (start @ a) * a
    nrm = np.linalg.norm(start)
    start = start / nrm if nrm > 0 else e1

    D = 2 * R
    P = 2 * math.pi * abs(rise)
    n = sweep / (2 * math.pi)
    length = sweep * math.hypot(R, rise)
    residual = float(np.sqrt(2 * res.cost / len(pts))) * R if R > 0 else 0.0
    if not D > 0 or n == 0:
        raise HelixFitError("degenerate helix fit")
    return HelixParams(D=D, P=P, alpha=helix_angle(D, P), n=n,
                       handedness="right" if rise >= 0 else "left", axis=tuple(a),
                       axis_point=tuple(axis_point), start_direction=tuple(start), length=length,
                       residual=residual, ring=P < RING_PITCH_RATIO * math.pi * D,
                       low_confidence=len(pts) < min_points or sweep < 2 * math.pi)


def helix_distance_rms(helix: HelixParams, points: np.ndarray, refine: int = 4000) -> float:
    """RMS distance from points to the fitted helix segment.

    The closest dense sample seeds a few Newton steps on the helix phase.
    """
    points = np.asarray(points, dtype=float)
    a, e1, e2 = _frame(np.asarray(helix.axis), np.asarray(helix.start_direction))
    R, c = helix.radius, helix.rise
    grid = np.linspace(0.0, helix.phase_end, max(refine, 2))
    lo, hi = min(0.0, helix.phase_end), max(0.0, helix.phase_end)
    dense = parametric_helix(helix, samples=len(grid))
    phi = grid[np.linalg.norm(points[:, None, :] - dense[None, :, :], axis=2).argmin(axis=1)]
    rel = points - np.asarray(helix.axis_point)
    for _ in range(20):
        cp, sp = np.cos(phi), np.sin(phi)
        curve = R * (np.outer(cp, e1) + np.outer(sp, e2)) + np.outer(c * phi, a)
        d1 = R * (np.outer(-sp, e1) + np.outer(cp, e2)) + c * a
        d2 = -R * (np.outer(cp, e1) + np.outer(sp, e2))
        diff = curve - rel
        grad = np.sum(diff * d1, axis=1)
        hess = np.sum(d1 * d1, axis=1) + np.sum(diff * d2, axis=1)
        step = np.where(hess > 0, grad / np.where(hess > 0, hess, 1.0), 0.0)
        phi = np.clip(phi - step, lo, hi)
        if np.max(np.abs(step)) < 1e-14:
            break
    curve = R * (np.outer(np.cos(phi), e1) + np.outer(np.sin(phi), e2)) + np.outer(c * phi, a)
    return float(np.sqrt(np.mean(np.sum((curve - rel) ** 2, axis=1))))


# ---------------------------------------------------------------------------
# centerline extraction and I/O
# ---------------------------------------------------------------------------

def extract_centerline(mesh, state) -> np.ndarray:
    """Deformed centroid of each lengthwise slab of elements, ordered along the length."""
    if not getattr(state, "converged", False):
        raise ValueError("refusing to extract a centerline from a non-converged state")
    disp = state.displacements if hasattr(state, "displacements") else np.asarray(state)
    centres = mesh.element_centers(disp)
    slab = mesh.element_ijk[:, 0]
    nx = mesh.shape[0]
    counts = np.bincount(slab, minlength=nx)
    out = np.column_stack([np.bincount(slab, weights=centres[:, k], minlength=nx) for k in range(3)])
    return out / counts[:, None]


def write_polyline(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_um", "y_um", "z_um"])
        for p in np.asarray(points):
            w.writerow([f"{v:.10g}" for v in p])


def read_polyline(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty polyline")
    return np.array([[float(r["x_um"]), float(r["y_um"]), float(r["z_um"])] for r in rows])
