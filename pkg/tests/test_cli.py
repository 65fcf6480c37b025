import pytest

from app.cli.evaluate import REPORT_FILE, evaluate
from app.main import build_parser, main
from app.services import runconfig

from conftest import tiny_run


def report(capsys) -> dict:
    lines = capsys.readouterr().out.strip().splitlines()
    return dict(line.split("=", 1) for line in lines if "=" in line)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    config = runconfig.save(tiny_run(), root / "tiny.txt")
    assert main(["pretrain", str(config), "--out", str(root / "out")]) == 0
    return root / "out"


def test_every_command_is_registered():
    parser = build_parser()
    for command in ("pretrain", "eval", "gradcheck", "synth", "version"):
        assert parser.parse_args([command] if command != "eval" else [command, "x.lmim"]).command == command


def test_synth_writes_a_dataset(tmp_path, capsys):
    out = tmp_path / "shapes"
    assert main(["synth", "--classes", "3", "--count", "6", "--size", "16", "--out", str(out)]) == 0
    values = report(capsys)
    assert values["images"] == "6" and values["classes"] == "3"
    assert (out / "index.csv").exists()
    assert main(["synth", "--segmentation", "--count", "2", "--size", "16", "--out", str(tmp_path / "seg")]) == 0
    assert len(list((tmp_path / "seg").glob("mask_*.pgm"))) == 2


def test_pretrain_writes_the_run_directory(trained):
    assert (trained / "final.lmim").exists()
    assert (trained / "metrics.csv").exists()
    assert runconfig.load(trained / "config.txt") == tiny_run()


def test_pretrain_prints_a_summary(tmp_path, capsys):
    config = runconfig.save(tiny_run(epochs=1, warmup_epochs=0), tmp_path / "tiny.txt")
    assert main(["pretrain", str(config), "--out", str(tmp_path / "out")]) == 0
    values = report(capsys)
    assert values["steps"] == "3"
    assert float(values["loss"]) > 0


def test_invalid_override_exits_with_2(tmp_path, capsys):
    code = main(["pretrain", "--preset", "naive", "--override", "mask_ratio=1.5", "--out", str(tmp_path)])
    assert code == 2
    assert "error:" in capsys.readouterr().err
    assert not (tmp_path / "metrics.csv").exists()


def test_config_and_preset_together_exit_with_2(tmp_path):
    config = runconfig.save(tiny_run(), tmp_path / "tiny.txt")
    assert main(["pretrain", str(config), "--preset", "naive"]) == 2


@pytest.mark.parametrize("protocol, key", [
    ("nn", "nn_accuracy"), ("probe", "probe_accuracy"), ("collapse", "pooled_pair_cos"), ("segment", "segment_ari"),
])
def test_eval_protocols(trained, capsys, protocol, key):
    checkpoint = trained / "final.lmim"
    capsys.readouterr()
    assert main(["eval", str(checkpoint), "--protocol", protocol]) == 0
    values = report(capsys)
    assert values["protocol"] == protocol and values["step"] == "6"
    value = float(values[key])
    assert -1.0 <= value <= 1.0
    assert (trained / f"eval-{protocol}" / REPORT_FILE).exists()


def test_eval_artifacts(trained, tmp_path):
    out = tmp_path / "seg"
    evaluate(trained / "final.lmim", "segment", out_dir=out)
    assert len(list((out / "segments").glob("seg_*.pgm"))) == 32
    out = tmp_path / "nn"
    evaluate(trained / "final.lmim", "nn", out_dir=out)
    assert (out / "features-train.lmim").exists() and (out / "features-test.lmim").exists()


def test_eval_on_a_dataset_directory(trained, tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--classes", "2", "--count", "8", "--size", "16", "--out", str(data)]) == 0
    capsys.readouterr()
    assert main(["eval", str(trained / "final.lmim"), str(data), "--protocol", "collapse"]) == 0
    assert report(capsys)["images"] == "8"


def test_eval_digest_mismatch_exits_with_4(trained):
    assert main(["eval", str(trained / "final.lmim"), "--override", "model.depth=1"]) == 4


def test_eval_missing_checkpoint_exits_with_4(tmp_path):
    assert main(["eval", str(tmp_path / "missing.lmim")]) == 4


def test_version(capsys):
    assert main(["version"]) == 0
    name, version = capsys.readouterr().out.split()
    assert name == "latent-mim-lab" and version.count(".") == 2


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--check", "square", "--check", "matmul"]) == 0
    out = capsys.readouterr().out
    assert "checks=2 failed=0" in out


def test_gradcheck_zero_tolerance_fails(capsys):
    assert main(["gradcheck", "--check", "softmax", "--tolerance", "0"]) == 1
    assert "FAIL" in capsys.readouterr().out
