"""Bead models of the microrobot and their rigid-body Stokes mobility.

Units: lengths in um, time in s, forces in pN, torques in pN um, viscosity in
mPa s (converted internally to pN s / um^2).  The 6x6 mobility is written as

    [U]   [A   G^T  ] [F  ]
    [W] = [G   F_rot] [tau]

about a reference point, so ``G`` maps force to angular velocity and ``G^T``
maps torque to translation.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from .helix import HelixParams

MPAS_TO_PN_S_PER_UM2 = 1e-3


class GeometryError(ValueError):
    pass


def skew(v) -> np.ndarray:
    """Matrix ``[v]x`` with ``[v]x w = v x w``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass
class BeadModel:
    centers: np.ndarray  # (N, 3) um
    radii: np.ndarray  # (N,) um
    viscosity: float = 1.0  # mPa s
    origin: tuple = (0.0, 0.0, 0.0)
    labels: Optional[np.ndarray] = None  # 0 tail, 1 head

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.radii = np.broadcast_to(np.asarray(self.radii, dtype=float), (len(self.centers),)).copy()
        if len(self.centers) < 1 or self.centers.shape[1] != 3:
            raise GeometryError("need at least one bead with 3D centre")
        if np.any(self.radii <= 0):
            raise GeometryError("bead radii must be positive")
        if not self.viscosity > 0:
            raise GeometryError("viscosity must be positive")
        if self.labels is None:
            self.labels = np.zeros(len(self.centers), dtype=int)
        self.labels = np.asarray(self.labels, dtype=int)
        self.origin = tuple(float(v) for v in self.origin)
        if len(self.centers) > 1:
            pairs = cKDTree(self.centers).query_pairs(self.radii.max() / 10.0)
            if pairs:
                raise GeometryError(f"{len(pairs)} bead pair(s) closer than max radius / 10")

    def __len__(self):
        return len(self.centers)

    @property
    def centroid(self) -> np.ndarray:
        return self.centers.mean(axis=0)

    def mirror(self, normal=(0.0, 0.0, 1.0)) -> "BeadModel":
        """Reflection across the plane through the origin with the given normal."""
        n = np.asarray(normal, float) / np.linalg.norm(normal)
        refl = np.eye(3) - 2 * np.outer(n, n)
        return BeadModel(self.centers @ refl.T, self.radii, self.viscosity,
                         tuple(refl @ np.asarray(self.origin)), self.labels.copy())

    def transformed(self, rotation=None, translation=None, scale: float = 1.0) -> "BeadModel":
        R = np.eye(3) if rotation is None else np.asarray(rotation, float)
        t = np.zeros(3) if translation is None else np.asarray(translation, float)
        return BeadModel(scale * self.centers @ R.T + t, scale * self.radii, self.viscosity,
                         tuple(scale * R @ np.asarray(self.origin) + t), self.labels.copy())

    def with_viscosity(self, viscosity: float) -> "BeadModel":
        return BeadModel(self.centers, self.radii, viscosity, self.origin, self.labels.copy())

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "radii": self.radii.tolist(),
                "viscosity": self.viscosity, "origin": list(self.origin),
                "labels": self.labels.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BeadModel":
        return cls(np.array(d["centers"]), np.array(d["radii"]), d["viscosity"],
                   tuple(d.get("origin", (0, 0, 0))), np.array(d.get("labels", [0] * len(d["radii"]))))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "BeadModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# bead discretisation
# ---------------------------------------------------------------------------

def hex_packed_box(dims: Sequence[float], bead_radius: float) -> np.ndarray:
    """Centres of hexagonally close-packed spheres filling a box centred at 0."""
    a = bead_radius
    dims = np.asarray(dims, dtype=float)
    half = 0.5 * dims - a  # admissible centre range
    if np.any(half < -1e-12):
        raise GeometryError("bead radius exceeds half the smallest head dimension")
    half = np.maximum(half, 0.0)
    dz = 2.0 * math.sqrt(6.0) / 3.0 * a
    dy = math.sqrt(3.0) * a
    nk = int(math.floor(2 * half[2] / dz + 1e-9)) + 1
    nj = int(math.floor(2 * half[1] / dy + 1e-9)) + 2
    ni = int(math.floor(2 * half[0] / (2 * a) + 1e-9)) + 2
    pts = []
    for k in range(nk):
        for j in range(nj):
            for i in range(ni):
                x = 2 * a * i + a * ((j + k) % 2)
                y = dy * (j + (k % 2) / 3.0)
                pts.append((x, y, dz * k))
    pts = np.array(pts)
    # centre the lattice, then keep spheres fully inside the box
    pts -= 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    inside = np.all(np.abs(pts) <= half + 1e-9, axis=1)
    pts = pts[inside]
    if len(pts) == 0:
        pts = np.zeros((1, 3))
    return pts - 0.5 * (pts.min(axis=0) + pts.max(axis=0))


def beadify(helix: Optional[HelixParams], tail_tube_radius: float, head_dims: Sequence[float],
            head_offset: float, bead_radius: float, viscosity: float = 1.0,
            dedup_factor: float = 1.0) -> BeadModel:
    """Bead model of a box head attached to a helical tail.

    Tail beads sit on the helix centerline every ``2 * bead_radius`` of arc
    length, starting at the helix start.  The head box (dims along the helix
    axis, the start direction and their cross product) is filled with
    close-packed beads; its centre lies on the axis, ``head_offset`` behind the
    helix start.  Head beads closer than ``dedup_factor * bead_radius`` to a
    tail bead are dropped.
    """
    a = float(bead_radius)
    if not a > 0:
        raise GeometryError("bead radius must be positive")
    if a > tail_tube_radius * (1 + 1e-12):
        raise GeometryError("bead radius exceeds the tail tube radius")
    if a > 0.5 * min(head_dims) * (1 + 1e-12):
        raise GeometryError("bead radius exceeds half the smallest head dimension")

    if helix is None:
        axis = np.array([0.0, 0.0, 1.0])
        e1 = np.array([1.0, 0.0, 0.0])
        start_on_axis = np.zeros(3)
        tail = np.zeros((0, 3))
    else:
        axis = np.asarray(helix.axis, float)
        e1 = np.asarray(helix.start_direction, float)
        start_on_axis = np.asarray(helix.axis_point, float)
        tail = np.zeros((0, 3))
        if helix.n > 0 and helix.length > 0:
            count = int(math.ceil(helix.length / (2 * a) - 1e-9))
            phi = 2 * a * np.arange(count) / math.hypot(helix.radius, helix.rise)
            if helix.handedness == "left":
                phi = -phi
            e2 = np.cross(axis, e1)
            R = helix.radius
            tail = (start_on_axis + R * np.outer(np.cos(phi), e1) + R * np.outer(np.sin(phi), e2)
                    + np.outer(helix.rise * phi, axis))
    e2 = np.cross(axis, e1)
    local = hex_packed_box(head_dims, a)
    basis = np.column_stack([axis, e1, e2])
    centre = start_on_axis - head_offset * axis
    head = centre + local @ basis.T
    if len(tail):
        d, _ = cKDTree(tail).query(head)
        head = head[d >= dedup_factor * a]
    centers = np.vstack([tail, head])
    labels = np.concatenate([np.zeros(len(tail), int), np.ones(len(head), int)])
    return BeadModel(centers, np.full(len(centers), a), viscosity, tuple(start_on_axis), labels)


# ---------------------------------------------------------------------------
# mobility
# ---------------------------------------------------------------------------

@nb.njit(cache=True)
def _rpy_matrix(x, a, eta):
    n = x.shape[0]
    M = np.zeros((3 * n, 3 * n))
    for i in range(n):
        s = 1.0 / (6.0 * np.pi * eta * a[i])
        for k in range(3):
            M[3 * i + k, 3 * i + k] = s
    for i in range(n):
        for j in range(i + 1, n):
            d = x[i] - x[j]
            r = np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
            ai, aj = a[i], a[j]
            if r > ai + aj:
                c = 1.0 / (8.0 * np.pi * eta * r)
                iso = c * (1.0 + (ai * ai + aj * aj) / (3.0 * r * r))
                rr = c * (1.0 - (ai * ai + aj * aj) / (r * r))
            elif r > abs(ai - aj):
                c = 1.0 / (6.0 * np.pi * eta * ai * aj)
                dif = (ai - aj) ** 2
                iso = c * (16.0 * r**3 * (ai + aj) - (dif + 3.0 * r * r) ** 2) / (32.0 * r**3)
                rr = c * 3.0 * (dif - r * r) ** 2 / (32.0 * r**3)
            else:
                iso = 1.0 / (6.0 * np.pi * eta * max(ai, aj))
                rr = 0.0
            for k in range(3):
                for l in range(3):
                    v = rr * d[k] * d[l] / (r * r)
                    if k == l:
                        v += iso
                    M[3 * i + k, 3 * j + l] = v
                    M[3 * j + l, 3 * i + k] = v
    return M


def grand_mobility(model: BeadModel) -> np.ndarray:
    """Translational bead mobility (3N x 3N), um / (pN s).

    Pair blocks use the Rotne-Prager-Yamakawa tensor generalised to unequal
    radii, with its overlapping and fully enclosed branches.
    """
    if len(model) > 1:
        pairs = cKDTree(model.centers).query_pairs(1e-12 * max(model.radii.max(), 1.0))
        if pairs:
            raise GeometryError("coincident bead centres")
    eta = model.viscosity * MPAS_TO_PN_S_PER_UM2
    return _rpy_matrix(model.centers, model.radii, eta)


@dataclass
class RigidBodyMobility:
    A: np.ndarray
    G: np.ndarray
    F_rot: np.ndarray
    reference: np.ndarray = field(default_factory=lambda: np.zeros(3))
    collinear: bool = False

    def __post_init__(self):
        self.A = np.asarray(self.A, float)
        self.G = np.asarray(self.G, float)
        self.F_rot = np.asarray(self.F_rot, float)
        self.reference = np.asarray(self.reference, float)
        self.collinear = bool(self.collinear)

    @property
    def matrix(self) -> np.ndarray:
        return np.block([[self.A, self.G.T], [self.G, self.F_rot]])

    @classmethod
    def from_matrix(cls, M: np.ndarray, reference, collinear=False) -> "RigidBodyMobility":
        M = 0.5 * (M + M.T)
        return cls(M[:3, :3], M[3:, :3], M[3:, 3:], np.asarray(reference, float), collinear)

    def resistance(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "G": self.G.tolist(), "F_rot": self.F_rot.tolist(),
                "reference": self.reference.tolist(), "collinear": self.collinear}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidBodyMobility":
        return cls(np.array(d["A"]), np.array(d["G"]), np.array(d["F_rot"]),
                   np.array(d["reference"]), d.get("collinear", False))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        """Blocks in long form: ``block,row,col,value``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "row", "col", "value"])
            for name in ("A", "G", "F_rot"):
                blk = getattr(self, name)
                for i in range(3):
                    for j in range(3):
                        w.writerow([name, i, j, f"{blk[i, j]:.17g}"])


def _rigid_kinematics(centers: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """(3N, 6) map from (U, W) about ``reference`` to bead velocities."""
    n = len(centers)
    K = np.zeros((3 * n, 6))
    for i, d in enumerate(centers - reference):
        K[3 * i:3 * i + 3, :3] = np.eye(3)
        K[3 * i:3 * i + 3, 3:] = -skew(d)
    return K


def rigid_body_mobility(model: BeadModel, reference=None) -> RigidBodyMobility:
    """6x6 mobility of the bead body about ``reference`` (bead centroid by default).

    Bead forces follow from imposing rigid-body velocities on the grand
    mobility; each bead also contributes its own rotational drag
    ``8 pi eta a^3`` so a lone sphere is exact.
    """
    ref = model.centroid if reference is None else np.asarray(reference, float)
    M = grand_mobility(model)
    K = _rigid_kinematics(model.centers, ref)
    R = K.T @ np.linalg.solve(M, K)
    eta = model.viscosity * MPAS_TO_PN_S_PER_UM2
    R[3:, 3:] += np.eye(3) * np.sum(8 * math.pi * eta * model.radii**3)
    R = 0.5 * (R + R.T)
    centred = model.centers - model.centers.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False) if len(model) > 1 else np.zeros(3)
    collinear = len(model) > 1 and sv[1] <= 1e-9 * max(sv[0], 1e-300)
    if np.linalg.cond(R) > 1e14:
        raise GeometryError("rigid-body resistance is singular (degenerate bead geometry)")
    return RigidBodyMobility.from_matrix(np.linalg.inv(R), ref, collinear)


def shift_reference(mob: RigidBodyMobility, new_point) -> RigidBodyMobility:
    """Exact rigid-body transformation of the mobility to a new reference point."""
    d = np.asarray(new_point, float) - mob.reference
    T = np.eye(6)
    T[:3, 3:] = -skew(d)
    return RigidBodyMobility.from_matrix(T @ mob.matrix @ T.T, np.asarray(new_point, float),
                                         mob.collinear)


def drag_anisotropy(mob: RigidBodyMobility, axis) -> float:
    """Ratio of perpendicular to parallel translational drag along ``axis``."""
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    R = np.linalg.inv(mob.A)
    perp = np.eye(3)[np.argmin(np.abs(a))]
    perp = perp - (perp @ a) * a
    perp /= np.linalg.norm(perp)
    return float(perp @ R @ perp) / float(a @ R @ a)
