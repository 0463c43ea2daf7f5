from pathlib import Path

import pytest

from app.cli import build_parser, main
from app.repositories.checkpoint_repository import CheckpointRepository
from app.repositories.dataset_repository import MANIFEST_NAME


class TestParser:
    def test_train_tokenizer_arguments(self):
        args = build_parser().parse_args(["train-tokenizer", "--config", "c.yaml", "--preset", "ijepa"])
        assert args.config == Path("c.yaml")
        assert args.preset == "ijepa"
        assert args.resume is None

    def test_rejects_unknown_preset(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train-tokenizer", "--preset", "huge"])

    def test_probe_requires_property(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train-probe", "--tokenizer", "t.pt", "--dataset", "d", "--out", "p.pt"])


class TestMain:
    def test_generate_data(self, tmp_path):
        out = tmp_path / "ds"
        code = main(["generate-data", "--task", "sprites", "--count", "2", "--length", "4", "--out", str(out)])
        assert code == 0
        assert (out / MANIFEST_NAME).is_file()

    def test_domain_errors_exit_non_zero(self, tmp_path):
        code = main(["train-worldmodel", "--tokenizer", str(tmp_path / "none.pt"), "--dataset", str(tmp_path)])
        assert code == 1

    def test_invalid_config_file_exits_non_zero(self, tmp_path):
        config = tmp_path / "bad.yaml"
        config.write_text("patch_size: 7\n")
        assert main(["train-tokenizer", "--config", str(config)]) == 1

    def test_plot_from_csv(self, tmp_path):
        csv_path = tmp_path / "curves.csv"
        csv_path.write_text("method,metric,step,value,seed\na,drift,1,0.5,0\na,drift,2,0.7,0\n")
        assert main(["plot", "--csv", str(csv_path), "--out", str(tmp_path / "plots")]) == 0
        assert (tmp_path / "plots" / "drift.png").is_file()

    def test_balls_world_model_gets_balls_horizons(self, trained_balls, tmp_path):
        config = tmp_path / "wm.yaml"
        config.write_text(
            f"output_dir: {tmp_path / 'wm'}\nwidth: 16\ndepth: 1\nnum_heads: 2\nbatch_size: 4\ntotal_steps: 1\n"
        )
        code = main(["train-worldmodel", "--config", str(config), "--tokenizer", str(trained_balls["djepa"]),
                     "--dataset", str(trained_balls["train"])])
        assert code == 0
        payload = CheckpointRepository().load(tmp_path / "wm" / "worldmodel.pt", kind="worldmodel")
        assert (payload["config"]["context_frames"], payload["config"]["predict_frames"]) == (6, 6)
