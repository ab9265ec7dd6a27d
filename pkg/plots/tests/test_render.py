"""Rendering: every figure kind, overlay band containment, hash refusal,
determinism, read-only inputs."""

import pytest

from branchfield_plots import (HashMismatchError, PlotJob,
                               SchemaMismatchError, render)


class TestKinds:
    def test_riccati(self, artifacts):
        out = artifacts["out"] / "riccati.png"
        diag = render(PlotJob("riccati", (str(artifacts["riccati"]),),
                              str(out)))
        assert out.exists() and out.stat().st_size > 1000
        assert diag["config_hash"]

    def test_moments_overlay_band(self, artifacts):
        out = artifacts["out"] / "moments.png"
        diag = render(PlotJob(
            "moments",
            (str(artifacts["flow_moments"]), str(artifacts["value_surface"])),
            str(out)))
        assert out.exists()
        # the Monte Carlo curve stays inside the ODE +- 3 SE band
        for name, frac in diag["band_containment"].items():
            assert frac == 1.0, (name, frac)

    def test_convergence(self, artifacts):
        out = artifacts["out"] / "convergence.png"
        diag = render(PlotJob(
            "convergence",
            (str(artifacts["cost"]), str(artifacts["alt_cost"])),
            str(out)))
        assert out.exists()
        assert diag["n_points"] == 2

    def test_density(self, artifacts):
        out = artifacts["out"] / "density.png"
        diag = render(PlotJob("density", (str(artifacts["density"]),),
                              str(out)))
        assert out.exists()
        assert diag["shape"][0] > 10 and diag["shape"][1] > 10

    def test_summary(self, artifacts):
        out = artifacts["out"] / "summary.png"
        diag = render(PlotJob("summary", (str(artifacts["summary"]),),
                              str(out)))
        assert out.exists()
        assert diag["n_passed"] == diag["n_checks"] == 3


class TestContracts:
    def test_hash_mismatch_refused_and_no_file(self, artifacts):
        out = artifacts["out"] / "refused.png"
        with pytest.raises(HashMismatchError):
            render(PlotJob(
                "moments",
                (str(artifacts["alt_flow_moments"]),
                 str(artifacts["value_surface"])),
                str(out)))
        assert not out.exists()

    def test_schema_mismatch(self, artifacts, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("# config_hash=abc\nt,wrong\n0,1\n")
        with pytest.raises(SchemaMismatchError):
            render(PlotJob("riccati", (str(bad),),
                           str(tmp_path / "x.png")))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown figure kind"):
            PlotJob("pie", ("a.csv",), "x.png")

    def test_rerender_is_byte_identical(self, artifacts, tmp_path):
        a = tmp_path / "a.png"
        b = tmp_path / "b.png"
        for out in (a, b):
            render(PlotJob("riccati", (str(artifacts["riccati"]),),
                           str(out)))
        assert a.read_bytes() == b.read_bytes()

    def test_inputs_untouched(self, artifacts, tmp_path):
        src = artifacts["riccati"]
        before = src.read_bytes()
        render(PlotJob("riccati", (str(src),), str(tmp_path / "r.png")))
        assert src.read_bytes() == before


class TestAcceptanceCriterion13:
    def test_all_five_kinds_from_primary_artifacts(self, artifacts):
        """Acceptance: render the five kinds from certification and Monte
        Carlo artifacts, band containment, and mismatch refusal."""
        out = artifacts["out"]
        jobs = [
            PlotJob("riccati", (str(artifacts["riccati"]),),
                    str(out / "c13_riccati.png")),
            PlotJob("moments", (str(artifacts["flow_moments"]),
                                str(artifacts["value_surface"])),
                    str(out / "c13_moments.png")),
            PlotJob("convergence", (str(artifacts["cost"]),
                                    str(artifacts["alt_cost"])),
                    str(out / "c13_convergence.png")),
            PlotJob("density", (str(artifacts["density"]),),
                    str(out / "c13_density.png")),
            PlotJob("summary", (str(artifacts["summary"]),),
                    str(out / "c13_summary.png")),
        ]
        moments_diag = None
        for job in jobs:
            diag = render(job)
            if job.kind == "moments":
                moments_diag = diag
        for job in jobs:
            from pathlib import Path

            assert Path(job.output).exists()
        assert all(v == 1.0
                   for v in moments_diag["band_containment"].values())
        with pytest.raises(HashMismatchError):
            render(PlotJob("moments",
                           (str(artifacts["alt_flow_moments"]),
                            str(artifacts["value_surface"])),
                           str(out / "c13_refused.png")))
        print("[PASS] criterion 13 plots: five kinds rendered, band "
              "contains MC curve, hash mismatch refused")
