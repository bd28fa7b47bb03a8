import hashlib
from pathlib import Path

import pytest

from faig import cli
from faig.config import ExperimentConfig, load_config
from faig.pipeline import Pipeline, PipelineError, read_csv

ROOT = Path(__file__).resolve().parents[1]
MICRO = str(ROOT / "configs" / "micro.ini")


def run(*args):
    return cli.main(list(args))


def tree_digest(folder: Path) -> dict[str, str]:
    return {str(p.relative_to(folder)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(folder.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro")
    flags = ["--config", MICRO, "--override", f"paths.output_dir={out}", "--seed", "0"]
    for command in ("prepare-data", "train-baseline", "finetune-target", "attribute"):
        assert run(command, *flags) == 0
    return out, flags


def test_config_roundtrip(tmp_path):
    cfg = load_config(MICRO)
    path = tmp_path / "cfg.ini"
    path.write_text(cfg.to_ini())
    assert load_config(path) == cfg
    assert load_config(ROOT / "configs" / "desk.ini") == ExperimentConfig()


def test_overrides_and_validation():
    cfg = load_config(None, ["baseline.iterations=2e3", "eval.calibrate=false", "experiment.seeds=4, 5",
                             "eval.sweep_fractions=0.1, 1.0"])
    assert cfg.baseline.iterations == 2000
    assert cfg.eval.calibrate is False
    assert cfg.seeds == (4, 5)
    assert cfg.eval.sweep_fractions == (0.1, 1.0)
    for bad in (["baseline.nope=1"], ["nosection.key=1"], ["baseline.iterations=2.5"], ["iterations=3"],
                ["baseline.lr=0"]):
        with pytest.raises(ValueError):
            load_config(None, bad)
    with pytest.raises(ValueError):
        load_config(None, ["experiment.seeds="])
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent.ini")


def test_output_dir_environment_override(monkeypatch, tmp_path):
    monkeypatch.setenv("FAIG_OUTPUT_DIR", str(tmp_path))
    assert load_config(MICRO).output_dir == tmp_path


def test_stage_digests_are_scoped():
    base = load_config(MICRO)
    tweaked = load_config(MICRO, ["eval.predict_steps=7"])
    assert base.digest("target") == tweaked.digest("target")
    assert base.digest("attribution") == tweaked.digest("attribution")
    assert base.digest("report") != tweaked.digest("report")
    assert base.digest("baseline") != load_config(MICRO, ["baseline.lr=1e-3"]).digest("baseline")


def test_missing_upstream_names_producer(tmp_path, capsys):
    flags = ["--config", MICRO, "--override", f"paths.output_dir={tmp_path}"]
    assert run("train-baseline", *flags) == 2
    assert "faig prepare-data" in capsys.readouterr().err
    assert run("prepare-data", *flags) == 0
    assert run("finetune-target", *flags, "--seed", "0") == 2
    err = capsys.readouterr().err
    assert "baseline.npz" in err and "faig train-baseline --seed 0" in err


def test_accelerator_rejected(capsys):
    assert run("plot", "--config", MICRO, "--device", "accelerator") == 2
    assert "accelerator" in capsys.readouterr().err


def test_mismatched_digest_rejected(micro_run):
    out, _ = micro_run
    other = load_config(MICRO, [f"paths.output_dir={out}", "finetune.lr=1e-4"])
    with pytest.raises(PipelineError, match="different configuration"):
        Pipeline(other, seeds=[0]).load_model(0, "target")
    with pytest.raises(PipelineError, match="different configuration"):
        Pipeline(other, seeds=[0]).load_scores(0, "faig", "blur")
    assert Pipeline(other, seeds=[0]).load_model(0, "baseline").spec == other.model
    with pytest.raises(PipelineError):
        read_csv(out / "data" / "calib" / "labels.csv", digest="0" * 16)


def test_attribute_outputs_and_idempotence(micro_run):
    out, flags = micro_run
    seed_dir = out / "seed0"
    for method in ("faig", "ig", "faig_nosub"):
        for d in ("blur", "noise"):
            assert (seed_dir / "scores" / f"{method}_{d}.npy").exists()
            assert (seed_dir / "filters" / f"{method}_{d}.csv").exists()
    assert (seed_dir / "filters" / "absdelta_any.csv").exists()
    before = tree_digest(seed_dir)
    assert run("attribute", *flags) == 0
    assert tree_digest(seed_dir) == before


def test_report_commands_carry_digest(micro_run):
    out, flags = micro_run
    for command in ("mask-eval", "sweep", "predict", "plot"):
        assert run(command, *flags) == 0
    digest = load_config(MICRO, [f"paths.output_dir={out}"]).digest("report")
    for name in ("mask_table", "mask_table_summary", "sweep", "sweep_summary", "predict", "predict_summary"):
        rows = read_csv(out / "reports" / f"{name}.csv", digest=digest)
        assert rows
    sweep = read_csv(out / "reports" / "sweep.csv")
    fractions = {float(r["fraction"]) for r in sweep}
    assert fractions == {0.01, 0.1, 1.0}
    assert {r["method"] for r in sweep} == {"faig", "random"}
    assert (out / "figures" / "mask_curves.png").exists()
    assert (out / "config.ini").read_text().startswith(f"# config_digest={digest}")
