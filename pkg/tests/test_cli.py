import json

import pytest

from milr.cli import main
from milr.config import load_config
from milr.errors import ConfigError

TINY = [
    "--set", "dataset.n_classes=5", "--set", "dataset.samples_per_class=8",
    "--set", "protonet.episodes=6", "--set", "protonet.n_query=3",
    "--set", "milr.episodes=4", "--set", "viz.sample_ids=0,9", "--set", "viz.contrast_size=8",
]


def test_defaults_without_file():
    cfg = load_config()
    assert cfg.seed == 0 and cfg.protonet.episodes == 2000 and cfg.milr.beta_weight == 0.01
    assert cfg.viz.blend == 0.5 and cfg.encoder.block_channels == [16, 32, 64]


def test_file_then_overrides(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nseed = 4\n[milr]\nbeta_weight = 0.5\n")
    cfg = load_config(ini, {"milr": {"beta_weight": "2.0"}})
    assert cfg.seed == 4 and cfg.milr.beta_weight == 2.0


@pytest.mark.parametrize("text", ["[run]\nsead = 1\n", "[nope]\na = 1\n", "[viz]\nblend = 2\n",
                                  "[dataset]\nn_classes = 3\n", "[milr]\nlr = abc\n", "[encoder]\ntap_index = 5\n"])
def test_invalid_files(tmp_path, text):
    ini = tmp_path / "bad.ini"
    ini.write_text(text)
    with pytest.raises(ConfigError):
        load_config(ini)


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "absent.ini"
    assert main(["synth-data", "--config", str(missing), "--out", str(tmp_path)]) != 0
    err = capsys.readouterr().err.strip()
    assert str(missing) in err and "\n" not in err


def test_missing_inputs_single_line_error(tmp_path, capsys):
    assert main(["explain", "--out", str(tmp_path)]) != 0
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "synth-data" in err


def _files(run_dir):
    return sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*") if p.is_file())


def test_tiny_pipeline_end_to_end(tmp_path, capsys):
    assert main(["pipeline", "--out", str(tmp_path / "a"), *TINY]) == 0
    run = tmp_path / "a" / "default"
    for sid in ("0", "9"):
        assert sorted(p.name for p in (run / sid).iterdir()) == sorted(
            f"{n}.png" for n in ("original", "total_heat", "total_mix", "decision_mix", "redundant_mix"))
    listed = set()
    for cmd in ("synth-data", "train-backbone", "train-milr", "explain"):
        manifest = json.loads((run / f"manifest_{cmd}.json").read_text())
        assert manifest["seed"] == 0 and manifest["version"] == "0.1.0" and manifest["command"] == cmd
        assert (run / manifest["config"]).is_file()
        listed |= {a["path"] for a in manifest["artifacts"]}
    manifests = {f"manifest_{c}.json" for c in ("synth-data", "train-backbone", "train-milr", "explain")}
    assert set(_files(run)) - manifests == listed

    # re-running explain against the same checkpoints is bit-reproducible
    before = (run / "maps.csv").read_bytes()
    pngs = {p: p.read_bytes() for p in run.rglob("*.png")}
    assert main(["explain", "--out", str(tmp_path / "a"), *TINY]) == 0
    assert (run / "maps.csv").read_bytes() == before
    assert all(p.read_bytes() == b for p, b in pngs.items())

    # an identical second run reproduces every artifact
    assert main(["pipeline", "--out", str(tmp_path / "b"), *TINY]) == 0
    other = tmp_path / "b" / "default"
    for name in ("dataset.milrdata", "backbone.ckpt", "milr.ckpt", "maps.csv"):
        assert (other / name).read_bytes() == (run / name).read_bytes()


def test_seed_changes_outputs(tmp_path):
    assert main(["synth-data", "--out", str(tmp_path), "--run-id", "s0", *TINY]) == 0
    assert main(["synth-data", "--out", str(tmp_path), "--run-id", "s1", "--seed", "1", *TINY]) == 0
    assert (tmp_path / "s0" / "dataset.milrdata").read_bytes() != (tmp_path / "s1" / "dataset.milrdata").read_bytes()


def test_calibrate_command(tmp_path):
    assert main(["calibrate", "--out", str(tmp_path), "--rho", "0.0,0.5", "--steps", "20",
                 "--set", "calibrate.vib_steps=20"]) == 0
    lines = (tmp_path / "default" / "calibration.csv").read_text().splitlines()
    assert lines[0] == "estimator,rho,analytic_mi,estimated_bound,steps"
    assert [l.split(",")[0] for l in lines[1:]] == ["infonce", "vib", "infonce", "vib"]


def test_bad_override_syntax(tmp_path, capsys):
    assert main(["synth-data", "--out", str(tmp_path), "--set", "seed=3"]) != 0
    assert "SECTION.KEY=VALUE" in capsys.readouterr().err
