import json

import numpy as np
import pytest

from gelswim.materials import HydrogelParams, free_swell_stretch
from gelswim.solver import (DeformedState, SolverConfig, SolverError, min_jacobian,
                            rigid_constraint_dofs, solve_equilibrium)
from gelswim.strip import box_mesh

REF = {0: HydrogelParams.from_state(0.1, 1.5)}


def cube(n=2):
    return box_mesh(n, n, n, 1.0 / n)


def swollen_stretch(state, mesh):
    x = state.positions(mesh)
    return (x.max(0) - x.min(0)) / (mesh.nodes.max(0) - mesh.nodes.min(0))


def test_homogeneous_cube_matches_free_swelling():
    m = cube()
    chi = REF[0].chi - 0.1
    st = solve_equilibrium(m, {0: HydrogelParams(0.1, 1.5, chi)}, materials_reference=REF)
    lam = free_swell_stretch(0.1, chi)
    np.testing.assert_allclose(swollen_stretch(st, m) * 1.5, lam, rtol=1e-6)
    assert st.converged and st.relative_grad_norm < 1e-8
    assert st.min_J > 1


def test_deswelling_cube():
    m = cube()
    chi = REF[0].chi + 0.2
    st = solve_equilibrium(m, {0: HydrogelParams(0.1, 1.5, chi)}, materials_reference=REF)
    np.testing.assert_allclose(swollen_stretch(st, m) * 1.5, free_swell_stretch(0.1, chi), rtol=1e-6)


def test_identity_environment_gives_zero_displacement():
    m = cube()
    st = solve_equilibrium(m, REF, materials_reference=REF)
    assert np.all(st.displacements == 0.0)
    assert st.iterations == 0


def test_chained_start_reaches_same_state():
    m = cube()
    mid = {0: HydrogelParams(0.1, 1.5, REF[0].chi + 0.1)}
    tgt = {0: HydrogelParams(0.1, 1.5, REF[0].chi + 0.2)}
    direct = solve_equilibrium(m, tgt, materials_reference=REF)
    first = solve_equilibrium(m, mid, materials_reference=REF)
    chained = solve_equilibrium(m, tgt, SolverConfig(schedule=(0.5, 1.0)), materials_reference=REF,
                                initial=first.displacements, materials_start=mid)
    np.testing.assert_allclose(swollen_stretch(chained, m), swollen_stretch(direct, m), rtol=1e-8)


def test_seeded_runs_are_identical():
    m = cube()
    tgt = {0: HydrogelParams(0.1, 1.5, REF[0].chi - 0.05)}
    a = solve_equilibrium(m, tgt, SolverConfig(seed=7), materials_reference=REF)
    b = solve_equilibrium(m, tgt, SolverConfig(seed=7), materials_reference=REF)
    assert a.displacements.tobytes() == b.displacements.tobytes()


def test_failure_reports_diagnostics():
    m = cube()
    tgt = {0: HydrogelParams(0.1, 1.5, REF[0].chi - 0.3)}
    cfg = SolverConfig(schedule=(1.0,), max_iter=1, max_bisections=0)
    with pytest.raises(SolverError) as err:
        solve_equilibrium(m, tgt, cfg, materials_reference=REF)
    assert "t_failed" in err.value.diagnostics


def test_nv_mismatch_rejected():
    with pytest.raises(ValueError):
        solve_equilibrium(cube(), {0: HydrogelParams(0.2, 1.5, 0.3)}, materials_reference=REF)


@pytest.mark.parametrize("kw", [dict(schedule=(0.5, 0.4, 1.0)), dict(schedule=(0.5,)),
                                dict(schedule=()), dict(quadrature=3)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_rigid_constraints_remove_six_modes():
    m = cube(3)
    dofs = rigid_constraint_dofs(m)
    assert len(dofs) == 6 and len(set(dofs)) == 6


def test_state_outputs(tmp_path):
    m = cube()
    st = solve_equilibrium(m, {0: HydrogelParams(0.1, 1.5, REF[0].chi - 0.1)}, materials_reference=REF)
    st.write_report(tmp_path / "r.json")
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["converged"] and rep["min_J"] == pytest.approx(st.min_J)
    st.write_vtk(m, tmp_path / "s.vtk")
    assert "VECTORS displacement" in (tmp_path / "s.vtk").read_text()
    assert isinstance(st, DeformedState)


def test_min_jacobian_of_reference():
    from gelswim.fem import HexModel
    m = cube()
    model = HexModel(m, REF)
    assert min_jacobian(model, np.zeros((m.n_nodes, 3))) == pytest.approx(1.5**3)
