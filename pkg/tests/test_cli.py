import json
from pathlib import Path

import numpy as np
import pytest

from pcs import cli, dataio, sensing
from pcs.cli import main, parse_suite


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def _synth_image(workdir, name="img.pgm", rows=24, cols=24, seed=3):
    assert main(["synth", "image", "--seed", str(seed), "--rows", str(rows),
                 "--cols", str(cols), "-o", name]) == 0
    return workdir / name


def _synth_cube(workdir, name="cube.pcs3", rows=8, cols=8, bands=4, seed=5):
    assert main(["synth", "cube", "--seed", str(seed), "--rows", str(rows),
                 "--cols", str(cols), "--bands", str(bands), "-o", name]) == 0
    return workdir / name


class TestSynth:
    def test_image_and_manifest(self, workdir):
        path = _synth_image(workdir)
        img = dataio.load_image(path)
        assert img.samples.shape == (24, 24)
        manifest = json.loads((workdir / "img.pgm.manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["master_seed"] == 3

    def test_deterministic_output(self, workdir):
        a = _synth_image(workdir, "a.pgm")
        b = _synth_image(workdir, "b.pgm")
        assert a.read_bytes() == b.read_bytes()

    def test_cube(self, workdir):
        path = _synth_cube(workdir)
        cube = dataio.load_cube(path)
        assert cube.samples.shape == (8, 8, 4)


class TestAcquire:
    def test_shapes_and_ratio(self, workdir, capsys):
        img = _synth_image(workdir, rows=32, cols=32)
        assert main(["acquire", str(img), "-m", "8", "--seed", "7", "-o", "m.pcsm"]) == 0
        out = capsys.readouterr().out
        assert "32 slices x 8 measurements" in out
        assert "4.00x" in out
        ms = sensing.load_measurements(workdir / "m.pcsm")
        assert ms.y.shape == (32, 8)

    def test_refuses_non_compressive_without_flag(self, workdir, capsys):
        img = _synth_image(workdir)
        assert main(["acquire", str(img), "-m", "24", "-o", "m.pcsm"]) == 2
        assert "error:" in capsys.readouterr().err
        assert main(["acquire", str(img), "-m", "24", "--non-compressive", "-o", "m.pcsm"]) == 0

    def test_same_seed_byte_identical(self, workdir):
        img = _synth_image(workdir)
        main(["acquire", str(img), "-m", "6", "--seed", "11", "-o", "a.pcsm"])
        main(["acquire", str(img), "-m", "6", "--seed", "11", "-o", "b.pcsm"])
        assert (workdir / "a.pcsm").read_bytes() == (workdir / "b.pcsm").read_bytes()

    def test_layout_needs_cube(self, workdir, capsys):
        img = _synth_image(workdir)
        assert main(["acquire", str(img), "--layout", "bands3d", "-m", "8", "-o", "m.pcsm"]) == 2
        assert "error:" in capsys.readouterr().err


class TestReconstruct:
    def test_2d_round_trip_with_truth(self, workdir):
        img = _synth_image(workdir, rows=24, cols=24)
        main(["acquire", str(img), "-m", "8", "--seed", "1", "-o", "m.pcsm"])
        assert main(["reconstruct", "m.pcsm", "--iters", "2", "--truth", str(img),
                     "-o", "rec"]) == 0
        lines = (workdir / "rec.report.csv").read_text().splitlines()
        assert lines[0].startswith("# manifest=")
        assert lines[1] == "iteration,mse,relative_change,elapsed_seconds"
        assert len(lines) >= 4
        cube = dataio.load_cube(workdir / "rec.pcs3")
        assert cube.samples.shape == (24, 24, 1)

    def test_filter_layout_mismatch_refused(self, workdir, capsys):
        img = _synth_image(workdir)
        main(["acquire", str(img), "-m", "8", "-o", "m.pcsm"])
        assert main(["reconstruct", "m.pcsm", "--filter", "blockls", "-o", "rec"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_3d_blockls_and_kcs(self, workdir):
        cube = _synth_cube(workdir)
        main(["acquire", str(cube), "--layout", "bands3d", "-m", "16", "-o", "c.pcsm"])
        assert main(["reconstruct", "c.pcsm", "--filter", "blockls", "--iters", "2",
                     "--init", "kcs", "--truth", str(cube), "-o", "crec"]) == 0
        rec = dataio.load_cube(workdir / "crec.pcs3")
        assert rec.samples.shape == (8, 8, 4)

    def test_3d_requires_blockls(self, workdir, capsys):
        cube = _synth_cube(workdir)
        main(["acquire", str(cube), "--layout", "bands3d", "-m", "16", "-o", "c.pcsm"])
        assert main(["reconstruct", "c.pcsm", "--filter", "p1", "-o", "rec"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_truth_shape_mismatch(self, workdir, capsys):
        img = _synth_image(workdir, rows=24, cols=24)
        other = _synth_image(workdir, name="other.pgm", rows=16, cols=24, seed=9)
        main(["acquire", str(img), "-m", "8", "-o", "m.pcsm"])
        assert main(["reconstruct", "m.pcsm", "--truth", str(other), "-o", "rec"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_input(self, workdir, capsys):
        assert main(["reconstruct", "nope.pcsm", "-o", "rec"]) == 2
        assert "error:" in capsys.readouterr().err


SUITE = """
# tiny grid
scenario = 2d
rows = 16
cols = 16
m = 4,8
seeds = 0
init = separate
filter = p3
iters = 2
"""


class TestBenchmark:
    def test_csv_outputs(self, workdir):
        Path("suite.txt").write_text(SUITE)
        assert main(["benchmark", "--suite", "suite.txt", "--out", "bench"]) == 0
        for name in ("mse_vs_iter.csv", "mse_vs_m.csv", "mse_per_band.csv",
                     "compressibility_vs_iter.csv"):
            lines = (workdir / "bench" / name).read_text().splitlines()
            assert lines[0].startswith("# manifest=")
            assert "," in lines[1]
        rows = (workdir / "bench" / "mse_vs_m.csv").read_text().splitlines()
        assert len(rows) == 2 + 2  # manifest + header + one row per m

    def test_empty_grid_gives_headers_only(self, workdir):
        Path("suite.txt").write_text(SUITE.replace("m = 4,8", "m = "))
        assert main(["benchmark", "--suite", "suite.txt", "--out", "bench"]) == 0
        lines = (workdir / "bench" / "mse_vs_m.csv").read_text().splitlines()
        assert len(lines) == 2

    def test_byte_identical_between_runs(self, tmp_path, monkeypatch):
        results = []
        for sub in ("run1", "run2"):
            d = tmp_path / sub
            d.mkdir()
            monkeypatch.chdir(d)
            Path("suite.txt").write_text(SUITE)
            assert main(["benchmark", "--suite", "suite.txt", "--out", "bench"]) == 0
            results.append({
                name: (d / "bench" / name).read_bytes()
                for name in ("mse_vs_iter.csv", "mse_vs_m.csv", "mse_per_band.csv",
                             "compressibility_vs_iter.csv")
            })
        assert results[0] == results[1]

    def test_parallel_jobs_match_serial(self, workdir):
        Path("suite.txt").write_text(SUITE)
        assert main(["benchmark", "--suite", "suite.txt", "--out", "serial", "--jobs", "1"]) == 0
        assert main(["benchmark", "--suite", "suite.txt", "--out", "par", "--jobs", "2"]) == 0
        serial = (workdir / "serial" / "mse_vs_iter.csv").read_text().splitlines()[1:]
        par = (workdir / "par" / "mse_vs_iter.csv").read_text().splitlines()[1:]
        assert serial == par

    def test_omp_cells(self, workdir):
        Path("suite.txt").write_text(SUITE + "include_omp = true\n")
        assert main(["benchmark", "--suite", "suite.txt", "--out", "bench"]) == 0
        content = (workdir / "bench" / "mse_vs_m.csv").read_text()
        assert ",omp," in content

    def test_3d_scenario_band_mse(self, workdir):
        Path("suite.txt").write_text(
            "scenario = 3d\nrows = 8\ncols = 8\nbands = 4\nm = 16\nseeds = 0\n"
            "filter = blockls\niters = 2\n"
        )
        assert main(["benchmark", "--suite", "suite.txt", "--out", "bench"]) == 0
        lines = (workdir / "bench" / "mse_per_band.csv").read_text().splitlines()
        assert len(lines) == 2 + 4  # one row per band

    def test_cell_mse_recomputable_from_persisted_recon(self, workdir):
        Path("suite.txt").write_text(SUITE)
        assert main(["benchmark", "--suite", "suite.txt", "--out", "bench"]) == 0
        rows = (workdir / "bench" / "mse_vs_m.csv").read_text().splitlines()[2:]
        header = (workdir / "bench" / "mse_vs_m.csv").read_text().splitlines()[1].split(",")
        for row in rows:
            vals = dict(zip(header, row.split(",")))
            name = (f"{vals['scenario']}_m{vals['m']}_{vals['init']}_"
                    f"{vals['filter']}_s{vals['seed']}.pcs3")
            rec = dataio.load_cube(workdir / "bench" / "recons" / name)
            truth = dataio.synth_image(int(vals["seed"]), 16, 16).samples
            recomputed = float(np.mean((rec.samples[:, :, 0] - truth) ** 2))
            assert recomputed == float(vals["final_mse"])

    def test_kcs_curve_ordering_through_harness(self, workdir):
        # joint-recovery initialization beats separate recovery at low rate
        Path("suite.txt").write_text(
            "scenario = 3d\nrows = 8\ncols = 8\nbands = 4\nm = 8\nseeds = 0\n"
            "init = separate,kcs\nfilter = blockls\niters = 2\n"
        )
        assert main(["benchmark", "--suite", "suite.txt", "--out", "bench"]) == 0
        lines = (workdir / "bench" / "mse_vs_m.csv").read_text().splitlines()
        header = lines[1].split(",")
        cells = {dict(zip(header, ln.split(",")))["init"]: dict(zip(header, ln.split(",")))
                 for ln in lines[2:]}
        assert float(cells["kcs"]["init_mse"]) < float(cells["separate"]["init_mse"])

    def test_3d_rows_scenario(self, workdir):
        Path("suite.txt").write_text(
            "scenario = 3d_rows\nrows = 8\ncols = 8\nbands = 4\nm = 8\nseeds = 0\n"
            "filter = p1\niters = 2\n"
        )
        assert main(["benchmark", "--suite", "suite.txt", "--out", "bench"]) == 0
        lines = (workdir / "bench" / "mse_vs_m.csv").read_text().splitlines()
        assert lines[2].startswith("3d_rows,8,")

    def test_failed_cell_recorded_run_continues(self, workdir, capsys):
        # m = 16 equals the slice length for a 4x4 band: that cell fails, the
        # m = 8 cell still lands in the CSVs and the exit code flags trouble
        Path("suite.txt").write_text(
            "scenario = 3d\nrows = 4\ncols = 4\nbands = 2\nm = 16,8\nseeds = 0\n"
            "filter = blockls\niters = 1\n"
        )
        assert main(["benchmark", "--suite", "suite.txt", "--out", "bench"]) == 1
        err = capsys.readouterr().err
        assert "cell failed" in err
        rows = (workdir / "bench" / "mse_vs_m.csv").read_text().splitlines()[2:]
        assert len(rows) == 1 and rows[0].startswith("3d,8,")

    def test_suite_parsing(self, workdir):
        Path("bad.txt").write_text("unknown_key = 3\n")
        with pytest.raises(ValueError):
            parse_suite("bad.txt")
        Path("cmt.txt").write_text("# only a comment\n\nrows = 8\n")
        cfg = parse_suite("cmt.txt")
        assert cfg["rows"] == "8"
        assert cfg["cols"] == cli._SUITE_DEFAULTS["cols"]


def test_manifest_digest_stable():
    manifest = cli.RunManifest(
        command="x",
        config={"a": 1},
        master_seed=5,
        input_digest="d",
        outputs=["o"],
        versions={"artifact": "0.1.0"},
    )
    again = cli.RunManifest(
        command="x",
        config={"a": 1},
        master_seed=5,
        input_digest="d",
        outputs=["o"],
        versions={"artifact": "0.1.0"},
    )
    assert manifest.digest() == again.digest()
