"""Planar bilayer strip blueprint and its voxelisation.

Axes: x runs along the strip length, y across the width and z through the
thickness.  The supporting (hard) layer occupies ``z < h2 - h1``; above it soft
stripes of width ``b1`` alternate with hard stripes of width ``b2``.  The stripe
normal makes the modulating angle ``theta`` with the length axis, so
``theta = 0`` puts stripes across the width (ring-like curling) and
``theta = 90`` puts them along the length.  A negative angle is the mirror
image of the positive one.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

HARD = 0
SOFT = 1
REGION_NAMES = {HARD: "hard", SOFT: "soft"}


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class StripDesign:
    W: float = 15.0  # um
    L: float = 150.0  # um
    theta: float = 45.0  # deg
    b1: float = 5.0  # um, soft stripe width
    b2: float = 5.0  # um, hard stripe width
    h1: float = 1.0  # um, soft layer thickness
    h2: float = 2.0  # um, overall thickness
    soft_power: float = 23.0  # mW
    hard_power: float = 35.0  # mW

    def __post_init__(self):
        # store plain floats so equal designs hash equally (30 and 30.0)
        for f in fields(self):
            try:
                object.__setattr__(self, f.name, float(getattr(self, f.name)))
            except (TypeError, ValueError) as exc:
                raise DesignError(f"{f.name} must be a number") from exc
        if not -90.0 <= self.theta <= 90.0:
            raise DesignError("theta must lie in [-90, 90] degrees")
        if min(self.W, self.L, self.b1, self.b2, self.h1) <= 0:
            raise DesignError("W, L, b1, b2, h1 must be positive")
        if not self.h1 < self.h2:
            raise DesignError("h1 must be smaller than h2 (supporting layer needed)")

    @property
    def period(self) -> float:
        return self.b1 + self.b2

    @property
    def support_thickness(self) -> float:
        return self.h2 - self.h1

    def mirrored(self) -> "StripDesign":
        return replace(self, theta=-self.theta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StripDesign":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "StripDesign":
        return cls.from_dict(json.loads(Path(path).read_text()))


def region_of_point(design: StripDesign, x, y, z):
    """Material region (``HARD`` or ``SOFT``) at reference position(s) ``(x, y, z)``."""
    x, y, z = (np.asarray(v, dtype=float) for v in (x, y, z))
    tol = 1e-9 * max(design.L, design.W, design.h2)
    inside = ((x >= -tol) & (x <= design.L + tol) & (y >= -tol) & (y <= design.W + tol)
              & (z >= -tol) & (z <= design.h2 + tol))
    if not np.all(inside):
        raise DesignError("point outside the strip box")
    th = math.radians(design.theta)
    s = (x - 0.5 * design.L) * math.cos(th) + (y - 0.5 * design.W) * math.sin(th)
    # soft stripe centred on the strip centre
    phase = np.mod(s + 0.5 * design.b1, design.period)
    soft = (z >= design.support_thickness) & (phase < design.b1)
    out = np.where(soft, SOFT, HARD)
    return int(out) if out.ndim == 0 else out


# local node order of a hexahedron in (x, y, z) offsets
HEX_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                        [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]])


@dataclass
class VoxelMesh:
    """Structured hexahedral mesh of cubic voxels.

    Nodes are numbered with the length index slowest so the stiffness matrix
    has a bandwidth set by one cross-section.
    """
    nodes: np.ndarray  # (N, 3) reference positions, um
    elements: np.ndarray  # (E, 8) node indices
    element_region: np.ndarray  # (E,)
    voxel: float
    shape: tuple  # (nx, ny, nz) voxels along length, width, thickness

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        self.element_region = np.ascontiguousarray(self.element_region, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def element_ijk(self) -> np.ndarray:
        nx, ny, nz = self.shape
        e = np.arange(self.n_elements)
        return np.column_stack([e // (ny * nz), (e // nz) % ny, e % nz])

    def element_centers(self, displacements: Optional[np.ndarray] = None) -> np.ndarray:
        x = self.nodes if displacements is None else self.nodes + displacements
        return x[self.elements].mean(axis=1)

    def reference_jacobians(self) -> np.ndarray:
        """Determinant of dX/dxi at each element centre."""
        X = self.nodes[self.elements]
        a = X[:, 1] - X[:, 0]
        b = X[:, 3] - X[:, 0]
        c = X[:, 4] - X[:, 0]
        return np.einsum("ei,ei->e", np.cross(a, b), c) / 8.0

    def volume_fraction(self, region: int) -> float:
        return float(np.mean(self.element_region == region))

    def write_vtk(self, path, displacements: Optional[np.ndarray] = None) -> None:
        """Legacy VTK unstructured grid with displacement vectors and region ids."""
        lines = ["# vtk DataFile Version 3.0", "gelswim voxel mesh", "ASCII",
                 "DATASET UNSTRUCTURED_GRID", f"POINTS {self.n_nodes} double"]
        lines += [f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in self.nodes]
        lines.append(f"CELLS {self.n_elements} {9 * self.n_elements}")
        lines += ["8 " + " ".join(str(int(i)) for i in el) for el in self.elements]
        lines.append(f"CELL_TYPES {self.n_elements}")
        lines += ["12"] * self.n_elements
        lines.append(f"CELL_DATA {self.n_elements}")
        lines += ["SCALARS region int 1", "LOOKUP_TABLE default"]
        lines += [str(int(r)) for r in self.element_region]
        if displacements is not None:
            lines.append(f"POINT_DATA {self.n_nodes}")
            lines.append("VECTORS displacement double")
            lines += [f"{u[0]:.9g} {u[1]:.9g} {u[2]:.9g}" for u in displacements]
        Path(path).write_text("\n".join(lines) + "\n")


def box_mesh(nx: int, ny: int, nz: int, voxel: float, region=None) -> VoxelMesh:
    """Structured box of ``nx * ny * nz`` voxels; ``region`` maps element centres to ids."""
    ii, jj, kk = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij")
    nodes = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()]).astype(float) * voxel

    def nid(i, j, k):
        return k + (nz + 1) * (j + (ny + 1) * i)

    ei, ej, ek = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    ei, ej, ek = ei.ravel(), ej.ravel(), ek.ravel()
    elements = np.column_stack([nid(ei + a, ej + b, ek + c) for a, b, c in HEX_CORNERS])
    centers = (np.column_stack([ei, ej, ek]) + 0.5) * voxel
    if region is None:
        regions = np.zeros(len(elements), dtype=np.int64)
    else:
        regions = np.asarray(region(centers[:, 0], centers[:, 1], centers[:, 2]), dtype=np.int64)
    return VoxelMesh(nodes, elements, regions, float(voxel), (nx, ny, nz))


def _cells(length: float, voxel: float, name: str) -> int:
    n = length / voxel
    k = max(int(round(n)), 1)
    if abs(n - k) > 1e-6 * max(n, 1.0):
        warnings.warn(f"{name}={length} is not a multiple of voxel={voxel}; using {k} voxels",
                      stacklevel=3)
    return k


def build_mesh(design: StripDesign, voxel: float = 0.5) -> VoxelMesh:
    """Voxelise the strip; each voxel takes the label of its centre."""
    smallest = min(design.h1, design.support_thickness, design.b1, design.b2)
    if voxel > smallest:
        raise DesignError(f"voxel {voxel} um exceeds the smallest feature {smallest} um")
    for name, t in (("h1", design.h1), ("h2 - h1", design.support_thickness)):
        if t / voxel < 2 - 1e-9:
            warnings.warn(f"fewer than 2 voxels through {name}", stacklevel=2)
    nx = _cells(design.L, voxel, "L")
    ny = _cells(design.W, voxel, "W")
    nz = _cells(design.h2, voxel, "h2")
    return box_mesh(nx, ny, nz, voxel, lambda x, y, z: region_of_point(design, x, y, z))
