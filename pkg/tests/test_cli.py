import json

import pandas as pd
import pytest

from skinssl.cli import main
from skinssl.config import ARTIFACTS_FILE_NAME, CONFIGS_DIR
from skinssl.downstream import SWEEP_COLUMNS


@pytest.fixture
def run_config(tmp_path):
    """Smoke config with data and runs kept under tmp_path."""
    config = {
        "include": str(CONFIGS_DIR / "smoke.json"),
        "simulator": {"play_seconds": 3.0, "force_presses": 8},
        "paths": {"data_dir": str(tmp_path / "data"), "runs_dir": str(tmp_path / "runs")},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    return path


class TestUsage:
    def test_frozen_needs_checkpoint(self):
        with pytest.raises(SystemExit) as exc:
            main(["train-task", "--task", "force", "--mode", "frozen"])
        assert exc.value.code == 2

    def test_budget_range(self):
        with pytest.raises(SystemExit) as exc:
            main(["train-task", "--task", "force", "--mode", "end_to_end", "--budget", "0"])
        assert exc.value.code == 2

    def test_sweep_mae_needs_checkpoint(self):
        with pytest.raises(SystemExit) as exc:
            main(["sweep", "--task", "pose", "--modes", "frozen_mae"])
        assert exc.value.code == 2

    def test_sweep_default_modes_need_checkpoint(self):
        with pytest.raises(SystemExit) as exc:
            main(["sweep", "--task", "force"])
        assert exc.value.code == 2

    def test_sweep_config_modes_need_checkpoint(self, tmp_path):
        path = tmp_path / "modes.json"
        path.write_text(json.dumps({"downstream": {"modes": ["end_to_end", "finetuned"]}}))
        with pytest.raises(SystemExit) as exc:
            main(["sweep", "--config", str(path), "--task", "force"])
        assert exc.value.code == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["distill-everything"])
        assert exc.value.code == 2


class TestRuntimeErrors:
    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"ssl": {"epochz": 3}}))
        assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "out")]) == 1

    def test_missing_dataset(self, run_config, tmp_path):
        assert main(["pretrain", "--config", str(run_config),
                     "--data", str(tmp_path / "nothing")]) == 1

    def test_empty_metrics_dir(self, tmp_path):
        (tmp_path / "metrics").mkdir()
        assert main(["export-plots", "--metrics", str(tmp_path / "metrics")]) == 1


class TestGenData:
    def test_writes_datasets_and_artifacts(self, run_config, tmp_path):
        out = tmp_path / "generated"
        assert main(["gen-data", "--config", str(run_config), "--out", str(out),
                     "--kinds", "force", "pose"]) == 0
        assert (out / ARTIFACTS_FILE_NAME).exists()
        artifacts = json.loads((out / ARTIFACTS_FILE_NAME).read_text())
        assert artifacts["command"] == "gen-data"
        assert any(name.startswith("force") for name in artifacts["artifacts"])
        assert not (tmp_path / ".generated.tmp").exists()

    def test_refuses_to_overwrite(self, run_config, tmp_path):
        out = tmp_path / "generated"
        args = ["gen-data", "--config", str(run_config), "--out", str(out), "--kinds", "force"]
        assert main(args) == 0
        assert main(args) == 1
        assert main(args + ["--overwrite"]) == 0

    def test_same_seed_same_bytes(self, run_config, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-data", "--config", str(run_config), "--out", str(tmp_path / name),
                         "--kinds", "force", "--seed", "3"]) == 0
        a = json.loads((tmp_path / "a" / ARTIFACTS_FILE_NAME).read_text())
        b = json.loads((tmp_path / "b" / ARTIFACTS_FILE_NAME).read_text())
        assert a["artifacts"] == b["artifacts"]
        assert a["config_hash"] == b["config_hash"]


def test_export_plots(tmp_path):
    metrics = tmp_path / "metrics"
    metrics.mkdir()
    rows = [["force", "frozen", b, s, "rmse", "z", 1.0 / b + s] for b in (0.1, 1.0) for s in (0, 1)]
    pd.DataFrame(rows, columns=SWEEP_COLUMNS).to_csv(metrics / "sweep_force.csv", index=False)
    assert main(["export-plots", "--metrics", str(metrics), "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "force.svg").exists()


@pytest.mark.slow
def test_full_pipeline(run_config, tmp_path):
    config = ["--config", str(run_config)]
    runs = tmp_path / "runs"
    checkpoint = runs / "pretrain_distill" / "pretrain.ckpt"

    assert main(["gen-data", *config]) == 0
    assert main(["pretrain", *config]) == 0
    assert checkpoint.exists()
    assert main(["probe", *config, "--checkpoint", str(checkpoint), "--certificate",
                 "--export-embeddings", str(tmp_path / "emb.npz")]) == 0
    assert (tmp_path / "emb.npz").exists()

    assert main(["train-task", *config, "--task", "force", "--mode", "frozen",
                 "--checkpoint", str(checkpoint), "--out", str(runs / "tasks")]) == 0
    decoder = next((runs / "tasks").glob("*.ckpt"))
    assert main(["eval", *config, "--task", "force", "--decoder", str(decoder), "--baseline",
                 "--out", str(runs / "eval")]) == 0
    results = json.loads((runs / "eval" / "eval_force.json").read_text())
    assert {"decoder", "pad_sum_baseline"} <= set(results)

    assert main(["sweep", *config, "--task", "force", "--modes", "frozen", "end_to_end",
                 "--checkpoint", str(checkpoint)]) == 0
    table = pd.read_csv(runs / "sweeps" / "sweep_force.csv")
    assert len(table[["mode", "budget", "seed"]].drop_duplicates()) == 2 * 2 * 1
    assert main(["export-plots", *config]) == 0
    assert (runs / "sweeps" / "force.svg").exists()
