import json
from pathlib import Path

import pytest

from mzs.cli import main


def write_json(path, payload):
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return str(path)


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen_config = write_json(root / "generate.json", {
        "out_dir": str(root / "studies"), "seed": 11,
        "n_pos": 6, "n_neg": 6, "dims": [16, 96, 96]})
    assert main(["generate", "--config", gen_config]) == 0
    pipe = {
        "manifest_path": str(root / "studies" / "manifest.jsonl"),
        "cache_dir": str(root / "cache"),
        "out_dir": str(root / "out"),
        "montage_n": 4, "filter_threshold": 0.2,
        "patch_px": 32, "stride": 16,
        "backend_dim": 64, "backend_resolution": 32,
        "montage_mode": "retrieved", "seed": 0,
        "dapt_lr": 1e-4, "dapt_batch_size": 2, "dapt_max_epochs": 4,
        "dapt_patience": 40, "dapt_interval": 4, "dapt_holdout": 0.2,
        "ensemble_size": 2,
    }
    pipe_config = write_json(root / "pipeline.json", pipe)
    return {"root": root, "gen_config": gen_config,
            "pipe": pipe, "pipe_config": pipe_config}


@pytest.fixture(scope="module")
def cli_extracted(cli_env):
    assert main(["extract", "--config", cli_env["pipe_config"]]) == 0
    return cli_env


@pytest.fixture(scope="module")
def cli_dapted(cli_extracted):
    assert main(["dapt", "--config", cli_extracted["pipe_config"]]) == 0
    return cli_extracted


def test_generate_reports_split_counts(cli_env, tmp_path, capsys):
    config = write_json(tmp_path / "gen.json", {
        "out_dir": str(tmp_path / "studies"), "seed": 3,
        "n_pos": 3, "n_neg": 3, "dims": [16, 96, 96]})
    assert main(["generate", "--config", config]) == 0
    out = capsys.readouterr().out
    assert "generated 6 studies" in out
    assert "pretrain" in out and "val" in out and "test" in out
    lines = (tmp_path / "studies" / "manifest.jsonl").read_text().strip().splitlines()
    assert len(lines) == 6


def test_generate_seed_flag_overrides_config(cli_env, tmp_path, capsys):
    base = {"n_pos": 2, "n_neg": 2, "dims": [16, 96, 96]}
    cfg_a = write_json(tmp_path / "a.json", {**base, "out_dir": str(tmp_path / "a"),
                                             "seed": 5})
    cfg_b = write_json(tmp_path / "b.json", {**base, "out_dir": str(tmp_path / "b"),
                                             "seed": 5})
    assert main(["generate", "--config", cfg_a]) == 0
    assert main(["generate", "--config", cfg_b, "--seed", "6"]) == 0
    vol_a = sorted((tmp_path / "a" / "volumes").iterdir())[0]
    vol_b = sorted((tmp_path / "b" / "volumes").iterdir())[0]
    assert vol_a.read_bytes() != vol_b.read_bytes()


def test_extract_is_idempotent_until_forced(cli_extracted, capsys):
    config = cli_extracted["pipe_config"]
    assert main(["extract", "--config", config]) == 0
    assert "0 written, 12 up to date, 0 failed" in capsys.readouterr().out
    assert main(["extract", "--config", config, "--force"]) == 0
    assert "12 written, 0 up to date, 0 failed" in capsys.readouterr().out


def test_zeroshot_prints_metrics(cli_extracted, capsys):
    config = cli_extracted["pipe_config"]
    assert main(["zeroshot", "--config", config, "--split", "test"]) == 0
    out = capsys.readouterr().out
    assert "interstitial lung disease: n=2 auroc=" in out
    assert "f1@0.5=" in out


def test_seed_override_refuses_stale_montages(cli_extracted, capsys):
    config = cli_extracted["pipe_config"]
    assert main(["zeroshot", "--config", config, "--seed", "3",
                 "--split", "test"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "refusing to mix artifacts" in err


def test_restricted_values_require_unsafe_flag(cli_extracted, tmp_path, capsys):
    env = cli_extracted
    odd = dict(env["pipe"], montage_n=2, out_dir=str(tmp_path / "out"))
    config = write_json(tmp_path / "odd.json", odd)
    assert main(["extract", "--config", config]) == 1
    assert "montage_n must be one of" in capsys.readouterr().err
    assert main(["extract", "--config", config, "--unsafe-config"]) == 0
    meta = json.loads(next((tmp_path / "out" / "montages" / "retrieved")
                           .glob("*.json")).read_text())
    assert len(meta["patches"]) == 4


def test_dapt_then_eval_flow(cli_dapted, capsys):
    config = cli_dapted["pipe_config"]
    out_dir = Path(cli_dapted["pipe"]["out_dir"])
    assert (out_dir / "dapt_summary.json").exists()
    assert list((out_dir / "checkpoints").glob("step*.ckpt"))
    assert main(["eval", "--config", config]) == 0
    out = capsys.readouterr().out
    assert "ensemble=2" in out
    assert "[baseline]" in out and "[adapted]" in out
    assert main(["eval", "--config", config, "--single"]) == 0
    assert "ensemble=1" in capsys.readouterr().out


def test_dapt_prints_training_summary(cli_dapted, capsys):
    config = cli_dapted["pipe_config"]
    assert main(["dapt", "--config", config]) == 0
    out = capsys.readouterr().out
    assert "best lr=1.00e-04" in out
    assert "checkpoints" in out and "excluded" in out


def test_extract_failures_exit_nonzero(cli_env, tmp_path, capsys):
    rows = [json.loads(line) for line in
            Path(cli_env["pipe"]["manifest_path"]).read_text().strip().splitlines()]
    broken = tmp_path / "broken.hvol"
    broken.write_bytes(Path(rows[0]["volume_path"]).read_bytes()[:32])
    rows[0]["volume_path"] = str(broken)
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    config = write_json(tmp_path / "cfg.json", dict(
        cli_env["pipe"], manifest_path=str(manifest),
        out_dir=str(tmp_path / "out")))
    assert main(["extract", "--config", config]) == 1
    captured = capsys.readouterr()
    assert "11 written" in captured.out and "1 failed" in captured.out
    assert f"FAILED {rows[0]['study_id']}" in captured.err


def test_zeroshot_before_extract_fails_cleanly(cli_env, tmp_path, capsys):
    config = write_json(tmp_path / "cfg.json", dict(
        cli_env["pipe"], out_dir=str(tmp_path / "out")))
    assert main(["zeroshot", "--config", config, "--split", "test"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "run extract" in err


def test_config_flag_is_required():
    with pytest.raises(SystemExit):
        main(["extract"])
    with pytest.raises(SystemExit):
        main(["not-a-command", "--config", "x.json"])
