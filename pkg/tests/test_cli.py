"""Problem-file validation, CLI round trips, end-to-end runs on tiny cases."""
import json
from pathlib import Path

import numpy as np
import pytest
from jsonschema import ValidationError

from millforge.cli import main, parse_directions
from millforge.io import read_grid_file, write_surface_stl
from millforge.problems import build_problem, bundled_problem_path, load_problem

TINY_PROBLEM = {
    "name": "tiny",
    "grid": {"spacing": 1.0, "padding": 3.0},
    "design_domain": [
        {"op": "add", "shape": "box", "min": [0, 0, 0], "max": [10, 10, 10]},
    ],
    "preserved": [
        {"name": "top", "shape": "box", "min": [0, 0, 8.5], "max": [10, 10, 10]},
        {"name": "base", "shape": "box", "min": [0, 0, 0], "max": [10, 10, 1.5]},
    ],
    "material": {"youngs_modulus_pa": 10e9, "poisson_ratio": 0.3},
    "load_cases": [
        {
            "loads": [{"patch": {"primitive": "top", "face": "+z"},
                       "force": [0, 0, -500.0]}],
            "fixed": [{"primitive": "base", "face": "-z"}],
        }
    ],
    "volume_fraction": 0.5,
    "milling": {"mode": "off"},
    "algorithm": {"name": "strict"},
    "limits": {"max_iters": 25},
}


def _write_tiny(tmp_path, **overrides):
    doc = json.loads(json.dumps(TINY_PROBLEM))
    doc.update(overrides)
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(doc))
    return p


class TestProblemFiles:
    def test_bundled_supportstruct_loads(self):
        problem, meta = load_problem(bundled_problem_path("supportstruct"))
        assert meta["name"] == "supportstruct"
        assert problem.volume_fraction == 0.20
        assert problem.material.poisson_ratio == 0.29
        assert problem.material.youngs_modulus == 17e9
        assert len(problem.symmetry_planes) == 2
        assert problem.tool.bit_radius == 3.0
        dom_vol = problem.domain.volume()
        assert abs(dom_vol - 50.0 ** 3) <= 0.02 * 50.0 ** 3

    def test_bundled_torquestruct_loads(self):
        problem, meta = load_problem(bundled_problem_path("torquestruct"))
        assert problem.volume_fraction == 0.30
        assert problem.material.youngs_modulus == 210e9
        assert problem.milling.mode == "heat"
        assert problem.algorithm == "relaxed" and problem.alpha == 0.25
        # central column is carved out of the design space
        assert problem.domain.sample((30.0, 31.5, 30.0)) > 0

    def test_schema_rejects_missing_material(self, tmp_path):
        doc = json.loads(json.dumps(TINY_PROBLEM))
        del doc["material"]
        with pytest.raises(ValidationError):
            build_problem(doc)

    def test_schema_rejects_bad_volume_fraction(self, tmp_path):
        doc = json.loads(json.dumps(TINY_PROBLEM))
        doc["volume_fraction"] = 1.4
        with pytest.raises(ValidationError):
            build_problem(doc)

    def test_unknown_patch_primitive_rejected(self):
        doc = json.loads(json.dumps(TINY_PROBLEM))
        doc["load_cases"][0]["loads"][0]["patch"]["primitive"] = "nope"
        with pytest.raises(ValueError):
            build_problem(doc)

    def test_force_converted_to_traction(self):
        problem, _ = build_problem(json.loads(json.dumps(TINY_PROBLEM)))
        patch, traction = problem.load_cases[0].tractions[0]
        assert np.allclose(traction, [0, 0, -500.0 / 100.0])

    def test_preserved_inside_domain(self):
        problem, _ = build_problem(json.loads(json.dumps(TINY_PROBLEM)))
        gap = problem.preserved.values - problem.domain.values
        assert gap.min() >= -problem.domain.h


class TestDirectionParsing:
    def test_numeric_triples(self):
        d = parse_directions("0,0,-1;1,0,0").directions
        assert np.allclose(d, [[0, 0, -1], [1, 0, 0]])

    def test_axis_tokens(self):
        d = parse_directions("+x;-z").directions
        assert np.allclose(d, [[1, 0, 0], [0, 0, -1]])

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            parse_directions("1,2")


class TestCliOptimize:
    def test_end_to_end(self, tmp_path):
        pf = _write_tiny(tmp_path)
        out = tmp_path / "out"
        rc = main(["optimize", str(pf), "-o", str(out), "--checkpoint-every", "10"])
        assert rc in (0, 3)  # tiny budget may stop infeasible but must finish
        summary = json.loads((out / "summary.json").read_text())
        assert summary["iterations"] >= 1
        assert (out / "final.stl").exists()
        assert (out / "log.csv").exists()
        loaded = read_grid_file(out / "final.lsg")
        assert loaded.grid.dims == (17, 17, 17)
        assert (out / "checkpoint_0010.lsg").exists()

    def test_deterministic_logs(self, tmp_path):
        pf = _write_tiny(tmp_path, limits={"max_iters": 10})
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["optimize", str(pf), "-o", str(out1)]) in (0, 3)
        assert main(["optimize", str(pf), "-o", str(out2)]) in (0, 3)
        assert (out1 / "log.csv").read_text() == (out2 / "log.csv").read_text()

    def test_bad_problem_file_reports_error(self, tmp_path, capsys):
        p = tmp_path / "broken.json"
        p.write_text(json.dumps({"grid": {"spacing": 1.0}}))
        rc = main(["optimize", str(p), "-o", str(tmp_path / "o")])
        assert rc == 2


class TestCliCheck:
    def test_convex_sphere_fully_millable(self, tmp_path, sphere10, capsys):
        stl = tmp_path / "sphere.stl"
        write_surface_stl(stl, sphere10)
        tool = tmp_path / "tool.json"
        tool.write_text(json.dumps(
            {"bit_radius": 1.0, "bit_length": 8.0, "head_radius": 2.5}))
        rc = main(["check", str(stl), "--tool", str(tool), "--mode", "hemisphere",
                   "--spacing", "0.75", "-o", str(tmp_path / "report.csv")])
        out = capsys.readouterr().out
        assert rc == 0
        assert "millable" in out
        report = (tmp_path / "report.csv").read_text().splitlines()
        assert report[0] == "x,y,z,nx,ny,nz,eta,mx,my,mz"
        assert len(report) > 100

    def test_blind_hole_flagged(self, tmp_path):
        import scenes
        ls, bottom, n = scenes.blind_hole_scene(hole_radius=2.0, depth=20.0)
        from millforge.io import write_grid_file
        shape = tmp_path / "hole.lsg"
        write_grid_file(shape, ls)
        tool = tmp_path / "tool.json"
        tool.write_text(json.dumps(
            {"bit_radius": 3.0, "bit_length": 25.0, "head_radius": 4.0}))
        rc = main(["check", str(shape), "--tool", str(tool), "--mode", "hemisphere",
                   "-o", str(tmp_path / "r.csv")])
        assert rc == 1
        rows = (tmp_path / "r.csv").read_text().splitlines()[1:]
        flagged = [r for r in rows if float(r.split(",")[6]) == 0.0]
        assert flagged  # hole-bottom samples are inaccessible

    def test_3axis_requires_dirs(self, tmp_path, sphere10):
        stl = tmp_path / "s.stl"
        write_surface_stl(stl, sphere10)
        tool = tmp_path / "tool.json"
        tool.write_text(json.dumps(
            {"bit_radius": 1.0, "bit_length": 8.0, "head_radius": 2.5}))
        assert main(["check", str(stl), "--tool", str(tool), "--mode", "3axis"]) == 2


class TestCliSweep:
    def test_mode_sweep_table(self, tmp_path):
        pf = _write_tiny(tmp_path, limits={"max_iters": 6})
        out = tmp_path / "sweep"
        rc = main(["sweep", str(pf), "--vary", "volume_fraction=0.5,0.6",
                   "-o", str(out), "--max-iters", "6"])
        assert rc == 0
        rows = (out / "results.csv").read_text().splitlines()
        assert rows[0].startswith("params,relative_compliance")
        assert len(rows) == 3
        assert (out / "run_000" / "final.stl").exists()
