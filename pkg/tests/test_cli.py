import json

import pytest

from euvptycho.cli import EXIT_ARGUMENT, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, main
from euvptycho.io import read_dataset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "sim.yaml").write_text("simulation: {n: 16, detector: 16, scan: [2, 2], spokes: 8}\n")
    assert main(["simulate", "--config", str(root / "sim.yaml"), "--out", str(root / "sim")]) == EXIT_OK
    (root / "run.yaml").write_text(
        "dataset: sim/dataset\noutput: recon\ninit: {probe_shape: [16, 16]}\nschedule: {epochs: 2}\n")
    assert main(["reconstruct", "--config", str(root / "run.yaml")]) == EXIT_OK
    return root


def test_simulate_and_reconstruct_outputs(workdir):
    assert read_dataset(workdir / "sim" / "dataset").n_shots == 4
    assert (workdir / "sim" / "object_truth_l0.png").is_file()
    for name in ("log.csv", "summary.json", "object_l0.png", "probe_l0_m0.png", "result/manifest.json"):
        assert (workdir / "recon" / name).exists()
    summary = json.loads((workdir / "recon" / "summary.json").read_text())
    assert summary["iterations"] == 2


def test_simulate_is_deterministic(workdir, tmp_path):
    args = ["simulate", "--config", str(workdir / "sim.yaml"), "--out"]
    main(args + [str(tmp_path / "a")])
    main(args + [str(tmp_path / "b")])
    a, b = (tmp_path / "a" / "dataset" / "patterns.bin"), (tmp_path / "b" / "dataset" / "patterns.bin")
    assert a.read_bytes() == b.read_bytes()


def test_analyze_commands(workdir, tmp_path):
    res = str(workdir / "recon" / "result")
    assert main(["analyze", "frc", res, res, "--out", str(tmp_path / "frc")]) == EXIT_OK
    assert main(["analyze", "modes", res, "--out", str(tmp_path / "modes")]) == EXIT_OK
    assert main(["analyze", "pupil", res, "--out", str(tmp_path / "pupil")]) == EXIT_OK
    assert any((tmp_path / "frc").iterdir()) and any((tmp_path / "pupil").iterdir())


def test_gradcheck_and_bench(tmp_path):
    small = ["gradcheck", "--size", "16", "--wavelengths", "1", "--modes", "1", "--out", str(tmp_path)]
    assert main(small) == EXIT_OK and (tmp_path / "gradcheck.json").is_file()
    assert main(small + ["--tol", "1e-30"]) == EXIT_NUMERICAL
    assert main(["bench", "--sizes", "1,1,1;1,2,1", "--iterations", "1", "--n", "16", "--shots", "2",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert len((tmp_path / "bench.csv").read_text().strip().splitlines()) == 3


def test_error_exit_codes(workdir, tmp_path, capsys):
    assert main(["reconstruct"]) == EXIT_ARGUMENT
    (tmp_path / "bad.yaml").write_text("dataset: missing\n")
    assert main(["reconstruct", "--config", str(tmp_path / "bad.yaml")]) == EXIT_ARGUMENT
    assert main(["analyze", "modes", str(tmp_path / "nowhere"), "--out", str(tmp_path / "an")]) == EXIT_DATA
    assert not (tmp_path / "an").exists()
    assert main(["bench", "--sizes", "1,x"]) == EXIT_ARGUMENT
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--precision", "f16"])
    assert info.value.code == EXIT_ARGUMENT
