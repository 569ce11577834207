"""Hexahedral finite-element discretisation of the gel free energy.

The mesh reference is the as-designed (free-swelling) configuration, itself a
uniform stretch ``lambda0`` of the dry network, so the dry-state deformation
gradient is ``F = lambda0 * F'`` with ``F'`` the gradient of the current
positions with respect to the reference ones.  Per reference volume the energy
density is ``W(F) / lambda0^3`` with

    W = Nv/2 (I1 - 3 - 2 log J) + (J - 1) log((J - 1)/J) + chi (J - 1)/J - mu (J - 1)

in units of ``M = kT/v``.  Energies are therefore in ``M * um^3`` and nodal
forces in ``M * um^2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numba as nb
import numpy as np

from .materials import HydrogelParams
from .strip import HEX_CORNERS, VoxelMesh

DEFAULT_J_FLOOR = 1e-6  # minimum admissible J - 1


class NonFiniteEnergyError(ValueError):
    def __init__(self, element: int, J: float):
        super().__init__(f"J = {J:.6g} <= 1 + floor in element {element}")
        self.element = element
        self.J = J


def gauss_shape_gradients(voxel: float):
    """Shape-function gradients at the 2x2x2 Gauss points of a cubic voxel.

    Returns ``(dNdX, wdet)`` with ``dNdX`` of shape (8 points, 8 nodes, 3) and
    the common quadrature weight times reference Jacobian.
    """
    g = 1.0 / np.sqrt(3.0)
    signs = 2 * HEX_CORNERS - 1  # +-1 natural coordinates of nodes
    pts = signs * g
    dN = np.empty((8, 8, 3))
    for q, (xi, eta, zeta) in enumerate(pts):
        for a, (sa, ta, ua) in enumerate(signs):
            dN[q, a, 0] = sa * (1 + ta * eta) * (1 + ua * zeta) / 8.0
            dN[q, a, 1] = ta * (1 + sa * xi) * (1 + ua * zeta) / 8.0
            dN[q, a, 2] = ua * (1 + sa * xi) * (1 + ta * eta) / 8.0
    half = 0.5 * voxel
    return dN / half, half**3


@dataclass
class MaterialTable:
    """Per-region arrays consumed by the kernels: ``[Nv, lambda0, chi, mu]``."""
    table: np.ndarray

    @classmethod
    def build(cls, materials: Mapping[int, HydrogelParams], mu_over_kT=0.0,
              n_regions: int | None = None) -> "MaterialTable":
        n = (max(materials) + 1) if n_regions is None else n_regions
        tab = np.full((n, 4), np.nan)
        for r, p in materials.items():
            mu = mu_over_kT[r] if isinstance(mu_over_kT, Mapping) else mu_over_kT
            tab[r] = (p.Nv, p.lambda0, p.chi, mu)
        return cls(tab)

    def check_covers(self, regions: np.ndarray) -> None:
        used = np.unique(regions)
        if used.max() >= len(self.table) or np.any(np.isnan(self.table[used])):
            raise ValueError("materials do not cover every region id in the mesh")


@nb.njit(cache=True)
def _det_inv(F):
    a, b, c = F[0, 0], F[0, 1], F[0, 2]
    d, e, f = F[1, 0], F[1, 1], F[1, 2]
    g, h, i = F[2, 0], F[2, 1], F[2, 2]
    A = e * i - f * h
    B = -(d * i - f * g)
    C = d * h - e * g
    det = a * A + b * B + c * C
    inv = np.empty((3, 3))
    inv[0, 0] = A / det
    inv[1, 0] = B / det
    inv[2, 0] = C / det
    inv[0, 1] = -(b * i - c * h) / det
    inv[1, 1] = (a * i - c * g) / det
    inv[2, 1] = -(a * h - b * g) / det
    inv[0, 2] = (b * f - c * e) / det
    inv[1, 2] = -(a * f - c * d) / det
    inv[2, 2] = (a * e - b * d) / det
    return det, inv


@nb.njit(cache=True)
def _element_F(xe, dNq):
    F = np.zeros((3, 3))
    for a in range(8):
        for i in range(3):
            for j in range(3):
                F[i, j] += xe[a, i] * dNq[a, j]
    return F


@nb.njit(cache=True)
def _density(F, nv, lam0, chi, mu):
    Jp, Finv = _det_inv(F)
    lam3 = lam0 * lam0 * lam0
    J = lam3 * Jp
    I1 = 0.0
    for i in range(3):
        for j in range(3):
            I1 += F[i, j] * F[i, j]
    I1 *= lam0 * lam0
    W = 0.5 * nv * (I1 - 3.0 - 2.0 * np.log(J)) + (J - 1.0) * (np.log1p(-1.0 / J) + chi / J) \
        - mu * (J - 1.0)
    return W / lam3, J, Finv


@nb.njit(cache=True)
def _energy_kernel(x, elems, region, mat, dN, wdet, floor, want_grad, grad, elem_energy):
    total = 0.0
    xe = np.empty((8, 3))
    for e in range(elems.shape[0]):
        for a in range(8):
            for i in range(3):
                xe[a, i] = x[elems[e, a], i]
        r = region[e]
        nv, lam0, chi, mu = mat[r, 0], mat[r, 1], mat[r, 2], mat[r, 3]
        ee = 0.0
        for q in range(8):
            F = _element_F(xe, dN[q])
            w, J, Finv = _density(F, nv, lam0, chi, mu)
            if not (J - 1.0 > floor):
                return np.inf, e, J
            ee += w * wdet
            if want_grad:
                p = np.log1p(-1.0 / J) + 1.0 / J + chi / (J * J) - mu
                c1 = nv / lam0
                c2 = (J * p - nv) / (lam0 * lam0 * lam0)
                # P' = c1 F' + c2 F'^-T
                for a in range(8):
                    node = elems[e, a]
                    for i in range(3):
                        s = 0.0
                        for j in range(3):
                            s += (c1 * F[i, j] + c2 * Finv[j, i]) * dN[q, a, j]
                        grad[node, i] += s * wdet
        elem_energy[e] = ee
        total += ee
    return total, -1, 0.0


@nb.njit(cache=True)
def _hessian_kernel(x, elems, region, mat, dN, wdet, ab):
    xe = np.empty((8, 3))
    Ke = np.empty((24, 24))
    g = np.empty((8, 3))
    dofs = np.empty(24, dtype=np.int64)
    for e in range(elems.shape[0]):
        for a in range(8):
            for i in range(3):
                xe[a, i] = x[elems[e, a], i]
                dofs[3 * a + i] = 3 * elems[e, a] + i
        r = region[e]
        nv, lam0, chi, mu = mat[r, 0], mat[r, 1], mat[r, 2], mat[r, 3]
        Ke[:, :] = 0.0
        for q in range(8):
            F = _element_F(xe, dN[q])
            _, J, Finv = _density(F, nv, lam0, chi, mu)
            p = np.log1p(-1.0 / J) + 1.0 / J + chi / (J * J) - mu
            dp = np.log1p(-1.0 / J) + 1.0 / (J - 1.0) - chi / (J * J) - mu  # d(J p)/dJ
            lam3 = lam0 * lam0 * lam0
            c0 = nv / lam0 * wdet
            c1 = J * dp / lam3 * wdet
            c2 = -(J * p - nv) / lam3 * wdet
            for a in range(8):
                for i in range(3):
                    s = 0.0
                    for j in range(3):
                        s += Finv[j, i] * dN[q, a, j]
                    g[a, i] = s
            for a in range(8):
                for b in range(8):
                    dd = dN[q, a, 0] * dN[q, b, 0] + dN[q, a, 1] * dN[q, b, 1] + dN[q, a, 2] * dN[q, b, 2]
                    for i in range(3):
                        for k in range(3):
                            v = c1 * g[a, i] * g[b, k] + c2 * g[a, k] * g[b, i]
                            if i == k:
                                v += c0 * dd
                            Ke[3 * a + i, 3 * b + k] += v
        for p_ in range(24):
            for q_ in range(24):
                P = dofs[p_]
                Q = dofs[q_]
                if P >= Q:
                    ab[P - Q, Q] += Ke[p_, q_]


@nb.njit(cache=True)
def _hessvec_kernel(x, elems, region, mat, dN, wdet, v, out):
    """``out += H v`` element by element, without forming H."""
    xe = np.empty((8, 3))
    ve = np.empty((8, 3))
    g = np.empty((8, 3))
    Lm = np.empty((3, 3))
    Km = np.empty((3, 3))
    for e in range(elems.shape[0]):
        for a in range(8):
            for i in range(3):
                xe[a, i] = x[elems[e, a], i]
                ve[a, i] = v[elems[e, a], i]
        r = region[e]
        nv, lam0, chi, mu = mat[r, 0], mat[r, 1], mat[r, 2], mat[r, 3]
        lam3 = lam0 * lam0 * lam0
        for q in range(8):
            F = _element_F(xe, dN[q])
            _, J, Finv = _density(F, nv, lam0, chi, mu)
            p = np.log1p(-1.0 / J) + 1.0 / J + chi / (J * J) - mu
            dp = np.log1p(-1.0 / J) + 1.0 / (J - 1.0) - chi / (J * J) - mu
            c0 = nv / lam0 * wdet
            c1 = J * dp / lam3 * wdet
            c2 = -(J * p - nv) / lam3 * wdet
            for a in range(8):
                for i in range(3):
                    s = 0.0
                    for j in range(3):
                        s += Finv[j, i] * dN[q, a, j]
                    g[a, i] = s
            # Lm[i, k] = sum_b v_bi g_bk ; Km[i, j] = sum_b v_bi dN_bj
            tr = 0.0
            for i in range(3):
                for k in range(3):
                    sl = 0.0
                    sk = 0.0
                    for b in range(8):
                        sl += ve[b, i] * g[b, k]
                        sk += ve[b, i] * dN[q, b, k]
                    Lm[i, k] = sl
                    Km[i, k] = sk
                tr += Lm[i, i]
            for a in range(8):
                na = elems[e, a]
                for i in range(3):
                    s = c1 * g[a, i] * tr + c0 * (Km[i, 0] * dN[q, a, 0] + Km[i, 1] * dN[q, a, 1]
                                                 + Km[i, 2] * dN[q, a, 2])
                    for k in range(3):
                        s += c2 * g[a, k] * Lm[k, i]
                    out[na, i] += s


class HexModel:
    """Energy, gradient and banded Hessian of a voxel mesh for fixed materials."""

    def __init__(self, mesh: VoxelMesh, materials: Mapping[int, HydrogelParams] | MaterialTable,
                 mu_over_kT=0.0, j_floor: float = DEFAULT_J_FLOOR):
        self.mesh = mesh
        self.dN, self.wdet = gauss_shape_gradients(mesh.voxel)
        self.j_floor = j_floor
        self.set_materials(materials, mu_over_kT)
        dofs = 3 * mesh.elements[:, :, None] + np.arange(3)
        dofs = dofs.reshape(len(mesh.elements), -1)
        self.bandwidth = int(np.max(dofs.max(axis=1) - dofs.min(axis=1)))

    def set_materials(self, materials, mu_over_kT=0.0):
        if not isinstance(materials, MaterialTable):
            materials = MaterialTable.build(materials, mu_over_kT)
        materials.check_covers(self.mesh.element_region)
        self.materials = materials

    @property
    def ndof(self) -> int:
        return 3 * self.mesh.n_nodes

    def _positions(self, u):
        return self.mesh.nodes + np.asarray(u, dtype=float).reshape(-1, 3)

    def energy(self, u, raise_on_invalid: bool = True) -> float:
        grad = np.zeros((1, 3))
        eel = np.empty(self.mesh.n_elements)
        E, bad, J = _energy_kernel(self._positions(u), self.mesh.elements, self.mesh.element_region,
                                   self.materials.table, self.dN, self.wdet, self.j_floor, False,
                                   grad, eel)
        if bad >= 0 and raise_on_invalid:
            raise NonFiniteEnergyError(int(bad), float(J))
        return E

    def energy_and_gradient(self, u, raise_on_invalid: bool = True):
        grad = np.zeros((self.mesh.n_nodes, 3))
        eel = np.empty(self.mesh.n_elements)
        E, bad, J = _energy_kernel(self._positions(u), self.mesh.elements, self.mesh.element_region,
                                   self.materials.table, self.dN, self.wdet, self.j_floor, True,
                                   grad, eel)
        if bad >= 0:
            if raise_on_invalid:
                raise NonFiniteEnergyError(int(bad), float(J))
            return np.inf, None
        return E, grad

    def gradient(self, u) -> np.ndarray:
        return self.energy_and_gradient(u)[1]

    def hessian_banded(self, u) -> np.ndarray:
        """Lower banded Hessian, ``ab[i - j, j] = H[i, j]`` (LAPACK layout)."""
        ab = np.zeros((self.bandwidth + 1, self.ndof), order="F")
        _hessian_kernel(self._positions(u), self.mesh.elements, self.mesh.element_region,
                        self.materials.table, self.dN, self.wdet, ab)
        return ab

    def hessian_vector(self, u, v) -> np.ndarray:
        """Hessian at ``u`` applied to ``v`` (both nodal arrays or flat)."""
        out = np.zeros((self.mesh.n_nodes, 3))
        _hessvec_kernel(self._positions(u), self.mesh.elements, self.mesh.element_region,
                        self.materials.table, self.dN, self.wdet,
                        np.ascontiguousarray(np.asarray(v, dtype=float).reshape(-1, 3)), out)
        return out

    def hessian_dense(self, u) -> np.ndarray:
        ab = self.hessian_banded(u)
        n = self.ndof
        H = np.zeros((n, n))
        for d in range(ab.shape[0]):
            idx = np.arange(n - d)
            H[idx + d, idx] = ab[d, : n - d]
            H[idx, idx + d] = ab[d, : n - d]
        return H


def energy(mesh: VoxelMesh, displacements, materials: Mapping[int, HydrogelParams],
           mu_over_kT=0.0) -> float:
    """Total free energy (``M * um^3``) of the mesh at the given nodal displacements."""
    return HexModel(mesh, materials, mu_over_kT).energy(displacements)


def gradient(mesh: VoxelMesh, displacements, materials: Mapping[int, HydrogelParams],
             mu_over_kT=0.0) -> np.ndarray:
    """Nodal derivative of :func:`energy`, shape (n_nodes, 3)."""
    return HexModel(mesh, materials, mu_over_kT).gradient(displacements)
