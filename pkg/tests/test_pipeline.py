import json

import numpy as np
import pytest

from gelswim.strip import HARD, SOFT
from gelswim.export import export_report, write_sweep_panels
from gelswim.pipeline import (ConfigError, DeformationCache, PipelineConfig, PipelineError,
                              SwimTarget, content_hash, deformation_key, design_search,
                              environment_materials, reference_materials, run_pipeline)


@pytest.fixture(scope="module")
def tiny_report(shared_cache):
    from conftest import TINY
    cfg = PipelineConfig.from_dict(TINY)
    return cfg, run_pipeline(cfg, shared_cache)


class TestConfig:
    def test_round_trip_and_hash(self, tiny_dict):
        cfg = PipelineConfig.from_dict(tiny_dict)
        again = PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again.hash() == cfg.hash()
        assert content_hash({"a": 1, "b": [1.0, 2]}) == content_hash({"b": [1.0, 2], "a": 1})

    @pytest.mark.parametrize("mutate", [
        lambda d: d.update(environments=[]),
        lambda d: d.update(version=2),
        lambda d: d["environments"].append({"name": "ipa", "fluid": "ipa"}),
        lambda d: d["environments"].append({"name": "oil", "fluid": "water"}),
        lambda d: d["environments"].append({"name": "x", "fluid": "mercury"}),
        lambda d: d["environments"].append({"name": "x", "fluid": "water", "chi": {"core": 0.5}}),
        lambda d: d.update(voxel=0.0),
        lambda d: d.update(solver={"schedule": [0.5]}),
        lambda d: d["design"].update(h1=3.0),
        lambda d: d.update(recipe_file="missing.json"),
    ])
    def test_invalid_configs(self, tiny_dict, mutate):
        mutate(tiny_dict)
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict(tiny_dict)

    def test_load_from_file(self, tmp_path, tiny_dict):
        design = tiny_dict.pop("design")
        (tmp_path / "design.json").write_text(json.dumps(design))
        tiny_dict["design_file"] = "design.json"
        (tmp_path / "c.json").write_text(json.dumps(tiny_dict))
        assert PipelineConfig.load(tmp_path / "c.json").design.L == 80.0
        with pytest.raises(ConfigError):
            PipelineConfig.load(tmp_path / "nope.json")

    def test_environment_overrides(self, tiny_dict):
        tiny_dict["environments"] = [{"name": "same", "solvent": "design", "fluid": "water"},
                                     {"name": "chi", "solvent": "design", "fluid": "water",
                                      "chi": {"soft": 0.9}}]
        cfg = PipelineConfig.from_dict(tiny_dict)
        ref = reference_materials(cfg)
        same = environment_materials(cfg, cfg.environments[0])
        assert same == ref
        chi = environment_materials(cfg, cfg.environments[1])
        assert chi[SOFT].chi == 0.9 and chi[SOFT].lambda0 < ref[SOFT].lambda0
        assert chi[HARD] == ref[HARD]


class TestCacheKeys:
    def test_key_ignores_downstream_settings(self, tiny_dict):
        a = PipelineConfig.from_dict(tiny_dict)
        tiny_dict["field"] = {"frequencies": [10.0], "B_low": 3.0}
        tiny_dict["head"] = {"dims": [20.0, 10.0, 8.0]}
        for e in tiny_dict["environments"]:
            e["fluid"] = {"density": 1000.0, "viscosity": 5.0}
        b = PipelineConfig.from_dict(tiny_dict)
        assert [deformation_key(a, i) for i in range(2)] == [deformation_key(b, i) for i in range(2)]
        c = a.with_design(theta=30.0)
        assert deformation_key(c, 0) != deformation_key(a, 0)

    def test_key_depends_on_chain(self, tiny_dict):
        a = PipelineConfig.from_dict(tiny_dict)
        tiny_dict["environments"].reverse()
        b = PipelineConfig.from_dict(tiny_dict)
        assert deformation_key(a, 1) != deformation_key(b, 0)

    def test_disk_round_trip(self, tmp_path, tiny_report, shared_cache):
        cfg, _ = tiny_report
        key = deformation_key(cfg, 0)
        state = DeformationCache(shared_cache).get(key)
        assert state is not None and state.converged
        fresh = DeformationCache(tmp_path)
        fresh.put("k", state)
        back = DeformationCache(tmp_path).get("k")
        assert back.displacements.tobytes() == state.displacements.tobytes()
        assert back.report() == state.report()


class TestRun:
    def test_water_more_compact_than_ipa(self, tiny_report):
        _, rep = tiny_report
        ipa, water = rep.environments["ipa"].helix, rep.environments["water"].helix
        assert water.P < ipa.P and water.D < ipa.D and water.n > ipa.n

    def test_report_contents(self, tiny_report):
        cfg, rep = tiny_report
        d = rep.to_dict()
        assert d["provenance"]["config_hash"] == cfg.hash()
        assert d["provenance"]["seed"] == 3
        for name in ("ipa", "water"):
            env = d["environments"][name]
            assert env["solver"]["converged"]
            assert env["helix"]["handedness"] in ("right", "left")
            assert len(env["frequency_response"]["f_hz"]) == 6
            assert env["max_speed_um_s"] > 0

    def test_reports_are_reproducible_without_cache(self, tiny_report):
        cfg, rep = tiny_report
        one = PipelineConfig.from_dict(cfg.to_dict())
        one.environments = one.environments[:1]
        a = run_pipeline(one)
        b = run_pipeline(one)
        assert a.to_json() == b.to_json()
        # and the chained first environment matches the cached full run
        assert a.to_dict()["environments"]["ipa"] == rep.to_dict()["environments"]["ipa"]

    def test_identity_environment_is_straight(self, tiny_dict):
        tiny_dict["environments"] = [{"name": "printed", "solvent": "design", "fluid": "water"}]
        rep = run_pipeline(PipelineConfig.from_dict(tiny_dict))
        r = rep.environments["printed"]
        assert r.straight and r.helix is None and r.response is None
        assert rep.to_dict()["environments"]["printed"]["max_speed_um_s"] == 0.0
        assert r.solver["iterations"] == 0

    def test_stage_tagged_errors(self, tiny_dict):
        tiny_dict["voxel"] = 3.0
        with pytest.raises(PipelineError) as err:
            run_pipeline(PipelineConfig.from_dict(tiny_dict))
        assert err.value.stage == "mesh"
        tiny_dict["voxel"] = 0.5
        tiny_dict["solver"] = {"schedule": [1.0], "max_iter": 1, "max_bisections": 0}
        with pytest.raises(PipelineError) as err:
            run_pipeline(PipelineConfig.from_dict(tiny_dict))
        assert err.value.stage == "swell" and "t_failed" in err.value.diagnostics

    def test_mirrored_design_flips_handedness_and_velocity(self, tiny_report, shared_cache):
        cfg, rep = tiny_report
        mirrored = cfg.with_design(theta=-cfg.design.theta)
        mrep = run_pipeline(mirrored, shared_cache)
        for name in ("ipa", "water"):
            a, b = rep.environments[name], mrep.environments[name]
            assert a.helix.handedness != b.helix.handedness
            for k in ("D", "P", "n"):
                assert getattr(b.helix, k) == pytest.approx(getattr(a.helix, k), rel=1e-6)
            ok = a.response.feasible & b.response.feasible
            assert ok.any()
            np.testing.assert_allclose(b.response.u_z[ok], -a.response.u_z[ok], rtol=1e-5)


class TestSearch:
    def test_single_point_grid(self, tiny_report, shared_cache):
        cfg, rep = tiny_report
        ranked, entries = design_search(SwimTarget(50.0), {"theta": [45.0]}, cfg, shared_cache)
        ok, score, _ = SwimTarget(50.0).evaluate(rep)
        assert len(entries) == 1
        assert (len(ranked) == 1) == ok
        if ok:
            assert ranked[0].score == pytest.approx(score)

    def test_unsatisfiable_target(self, tiny_report, shared_cache):
        cfg, _ = tiny_report
        ranked, entries = design_search(SwimTarget(1.0e6), {"theta": [45.0]}, cfg, shared_cache)
        assert ranked == []
        assert "not synchronous" in entries[0].reason

    def test_failed_designs_carry_reasons(self, tiny_report, shared_cache):
        cfg, _ = tiny_report
        ranked, entries = design_search(SwimTarget(50.0), {"b1": [0.3]}, cfg, shared_cache)
        assert ranked == [] and entries[0].reason.startswith("[mesh]")


class TestExport:
    def test_files_and_byte_stability(self, tmp_path, tiny_report):
        cfg, rep = tiny_report
        d = rep.to_dict()
        a = export_report(d, tmp_path / "a", recipe=cfg.recipe)
        b = export_report(d, tmp_path / "b", recipe=cfg.recipe)
        names = sorted(p.name for p in a)
        assert names == sorted(["report.json", "frequency_ipa.csv", "frequency_water.csv",
                                "frequency_response.svg", "deswelling.svg"])
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()
        header = (tmp_path / "a" / "frequency_water.csv").read_text().splitlines()[0]
        assert header == "f_hz,u_z_um_s,precession_deg,feasible"

    def test_sweep_panels(self, tmp_path):
        rows = lambda s: [{"D_um": 10.0 * s, "P_um": 20.0 * s + v, "alpha_deg": 40.0 - v,  # noqa: E731
                           "n_turns": 2.0 * s, "step_out_hz": 100.0 - v, "max_speed_um_s": 1.0}
                          for v in (15.0, 30.0, 45.0)]
        sweep = {"parameter": "theta", "values": [15.0, 30.0, 45.0],
                 "tables": {"ipa": rows(1.0), "water": rows(0.8)}}
        paths = write_sweep_panels(sweep, tmp_path)
        panels = sorted(p.name for p in paths if p.name.startswith("sweep_"))
        assert panels == ["sweep_angle.csv", "sweep_diameter.csv", "sweep_pitch.csv", "sweep_turns.csv"]
        lines = (tmp_path / "sweep_pitch.csv").read_text().splitlines()
        assert lines[0] == "theta,ipa_um,water_um"
        assert lines[1] == "15,35,31"
