import json

import numpy as np
import pytest

from csasr.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_DIVERGED,
    EXIT_OK,
    apply_overrides,
    main,
    parse_overrides,
)
from csasr.model import ConfigError

from helpers import tiny_experiment


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("CSASR_OUTPUT_ROOT", str(tmp_path))
    cfg = tiny_experiment(system=None, epochs=2).to_dict()
    (tmp_path / "exp.json").write_text(json.dumps(cfg))
    return tmp_path


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_parse_and_apply_overrides():
    got = parse_overrides(["--model.d-model", "16", "--epochs", "3", "--system", "S2.1", "--noise_std", "0.5"])
    assert got == {"model.d_model": 16, "epochs": 3, "system": "S2.1", "noise_std": 0.5}
    cfg = apply_overrides({"model": {"heads": 2}}, {**got, "heads": 4})
    assert cfg["model"] == {"heads": 4, "d_model": 16}
    assert cfg["corpus"] == {"noise_std": 0.5} and cfg["epochs"] == 3
    with pytest.raises(ConfigError):
        apply_overrides({}, {"nonsense": 1})
    with pytest.raises(ConfigError):
        apply_overrides({}, {"optim.lr": 1})
    with pytest.raises(ConfigError):
        parse_overrides(["--epochs"])


def test_full_workflow(root, capsys):
    assert main(["gen-corpus", "--config", str(root / "exp.json"), "--out", "corpus"]) == EXIT_OK
    info = last_json(capsys)
    assert info["splits"]["train"] == 24 and (root / "corpus").is_dir()

    args = ["train", "--config", str(root / "exp.json"), "--corpus", str(root / "corpus"), "--out", "run"]
    assert main(args + ["--system", "S2.8"]) == EXIT_OK
    run = last_json(capsys)
    assert (root / "run" / "averaged.ckpt").exists() and run["valid_mer"] is not None

    ckpt = str(root / "run" / "averaged.ckpt")
    rc = main(["evaluate", "--checkpoint", ckpt, "--corpus", str(root / "corpus"), "--split", "test_mono",
               "--beam", "2", "--out", "report.json", "--decode-out", "dec/test_mono.jsonl"])
    assert rc == EXIT_OK
    report = json.loads((root / "report.json").read_text())
    assert report["split"] == "test_mono" and "per_language" in report and "ld_accuracy" in report
    assert len((root / "dec" / "test_mono.jsonl").read_text().splitlines()) == 8
    capsys.readouterr()

    kept = sorted(str(p) for p in (root / "run" / "checkpoints").iterdir())
    assert main(["average", "--out", "avg/again.ckpt", *kept]) == EXIT_OK
    assert last_json(capsys)["inputs"] == len(kept)
    from csasr.autodiff import load_checkpoint

    a, _ = load_checkpoint(root / "avg" / "again.ckpt")
    b, _ = load_checkpoint(ckpt)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_ablate_and_report(root, capsys):
    rc = main(["ablate", "--config", str(root / "exp.json"), "--systems", "S0,S2.1", "--seeds", "0",
               "--out", "abl", "--epochs", "1", "--valid_mer_utts", "0"])
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    assert "S2.1" in text and "trend checks" in text
    table = json.loads((root / "abl" / "ablation.json").read_text())
    assert [r["system"] for r in table["rows"]] == ["S0", "S2.1"]
    assert (root / "abl" / "ablation.txt").read_text() == text
    assert main(["report", "--results", "abl"]) == EXIT_OK
    assert capsys.readouterr().out == text


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--epochs", "0"],
        ["train", "--bogus", "1"],
        ["train", "--config", "missing.json"],
        ["ablate", "--systems", "S7"],
        ["gen-corpus", "--switch_prob", "3"],
        ["train", "--system", "S0", "--beta", "0.5"],
    ],
)
def test_config_errors(root, argv):
    assert main(argv) == EXIT_CONFIG


def test_data_errors(root, tmp_path):
    assert main(["train", "--corpus", str(tmp_path / "nowhere")]) == EXIT_DATA
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert main(["evaluate", "--checkpoint", str(tmp_path / "junk.ckpt")]) == EXIT_DATA
    assert main(["evaluate", "--checkpoint", str(tmp_path / "absent.ckpt")]) == EXIT_DATA
    assert main(["report", "--results", "none"]) == EXIT_DATA


def test_missing_split_is_a_data_error(root, capsys):
    main(["train", "--config", str(root / "exp.json"), "--out", "r", "--epochs", "1", "--valid_mer_utts", "0"])
    assert main(["evaluate", "--checkpoint", str(root / "r" / "averaged.ckpt"), "--split", "dev"]) == EXIT_DATA


def test_divergence_exit_code(root, monkeypatch, capsys):
    import csasr.training as tr

    monkeypatch.setattr(tr, "clip_grad_norm", lambda params, max_norm: float("inf"))
    assert main(["train", "--config", str(root / "exp.json"), "--out", "bad"]) == EXIT_DIVERGED
    assert (root / "bad" / "divergence_dump.npz").exists()
    assert "divergence_dump.npz" in capsys.readouterr().err


def test_unknown_flag_for_fixed_commands(root):
    with pytest.raises(SystemExit):
        main(["report", "--colour", "red"])
