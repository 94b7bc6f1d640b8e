import json
from pathlib import Path
from typing import List

import pytest

from shared_utils import read_csv
from sta_cli import main
from state_transition.checkpoint import load_checkpoint
from state_transition.run_config import RESOLVED_CONFIG_FILE, load_config
from state_transition.training import BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE

MICRO = [
    "env.grid_size=8", "env.horizon=30",
    "policy.n_layers=1", "policy.d_model=8", "policy.n_heads=2", "policy.k_max=3",
    "policy.conv_channels=[2, 3]", "policy.head_hidden=4",
    "train.epochs=1", "train.batch_size=2", "train.sequence_length=4", "train.batches_per_epoch=2",
    "train.eval_episodes=2", "train.eval_seeds=1",
    "data.episodes=6", "bench.repeats=1",
]


def micro_flags() -> List[str]:
    flags = ["--quiet"]
    for override in MICRO:
        flags += ["--set", override]
    return flags


class VerifyUsage:
    def verify_help(self) -> None:
        assert main(["--help"]) == 0
        assert main(["train", "--help"]) == 0

    def verify_no_command(self, capsys: pytest.CaptureFixture) -> None:
        assert main([]) == 1
        assert "COMMAND" in capsys.readouterr().out

    def verify_unknown_command(self, capsys: pytest.CaptureFixture) -> None:
        assert main(["trian", "--data", "x"]) == 1
        assert "did you mean train" in capsys.readouterr().err

    def verify_unknown_flag(self, capsys: pytest.CaptureFixture) -> None:
        assert main(["train", "--data", "x", "--variantt", "sta"]) == 1
        err = capsys.readouterr().err
        assert "--variantt" in err and "did you mean --variant" in err

    def verify_missing_required_flag(self, capsys: pytest.CaptureFixture) -> None:
        assert main(["eval"]) == 1
        assert "--checkpoint" in capsys.readouterr().err

    def verify_bad_variant(self, capsys: pytest.CaptureFixture) -> None:
        assert main(["train", "--data", "x", "--variant", "stta"]) == 1
        assert "did you mean sta" in capsys.readouterr().err

    def verify_config_error(self, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
        config = tmp_path / "bad.yaml"
        config.write_text("train:\n  sequence_length: 1\n")
        assert main(["bench", "--config", str(config), "--out", str(tmp_path / "out")]) == 1
        err = capsys.readouterr().err
        assert "train.sequence_length" in err and "line 2" in err

    def verify_runtime_error(self, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
        assert main(["train", "--quiet", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "out")]) == 2
        assert "error:" in capsys.readouterr().err

    def verify_train_references_need_data(self, tmp_path: Path) -> None:
        args = ["ablate-history", "--checkpoint", str(tmp_path / "x.ckpt"), "--train-references",
                "--out", str(tmp_path / "out")]
        assert main(args) == 1


class VerifyPipeline:
    def verify_generate_train_eval(self, tmp_path: Path) -> None:
        data, run, evaluation = tmp_path / "data", tmp_path / "run", tmp_path / "eval"
        assert main(["generate-data", "--seed", "0", "--no-noise", "--out", str(data)] + micro_flags()) == 0
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["n_episodes_requested"] == 6

        assert main(["train", "--seed", "0", "--data", str(data), "--out", str(run)] + micro_flags()) == 0
        for name in (BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE, RESOLVED_CONFIG_FILE):
            assert (run / name).exists()
        resolved = load_config(run / RESOLVED_CONFIG_FILE)
        assert resolved.policy.d_model == 8 and resolved.train.epochs == 1
        checkpoint = load_checkpoint(run / BEST_CHECKPOINT)
        assert checkpoint.metadata["seed"] == 0

        args = ["eval", "--checkpoint", str(run / BEST_CHECKPOINT), "--history", "1", "--masked-inference",
                "--out", str(evaluation)]
        assert main(args + micro_flags()) == 0
        report = json.loads((evaluation / "eval.json").read_text())
        assert len(report["per_seed"]) == 1 and 0.0 <= report["mean"] <= 1.0
        assert report["masked_inference"] is True and report["inference_history"] == 1

    def verify_inspect_attention(self, tmp_path: Path) -> None:
        data, run, traces = tmp_path / "data", tmp_path / "run", tmp_path / "traces"
        assert main(["generate-data", "--no-noise", "--out", str(data)] + micro_flags()) == 0
        assert main(["train", "--data", str(data), "--out", str(run)] + micro_flags()) == 0
        args = ["inspect-attention", "--checkpoint", str(run / LAST_CHECKPOINT), "--episode-seed", "3",
                "--out", str(traces)]
        assert main(args + micro_flags()) == 0
        assert json.loads((traces / "manifest.json").read_text())["kind"] == "sta"
        assert read_csv(traces / "heatmap.csv")

    def verify_bench(self, tmp_path: Path) -> None:
        out = tmp_path / "bench"
        assert main(["bench", "--histories", "0,2", "--out", str(out)] + micro_flags()) == 0
        rows = read_csv(out / "bench.csv")
        assert len(rows) == 6
        assert {int(row["history"]) for row in rows} == {0, 2}
