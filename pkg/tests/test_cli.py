import csv
import json

import pytest

from cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, main
from shapes_dataset import write_splits
from trainer import save_checkpoint
from utils import sha256_file

SMALL_DETECTOR = "detector.input_size=64\ndetector.channels=8,16,16,16\n"


def _config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def checkpoint(tmp_path, untrained_model):
    return save_checkpoint(tmp_path / "untrained.pt", untrained_model, seed=0)


@pytest.fixture(scope="module")
def trained_checkpoint(trained):
    return save_checkpoint(trained.root / "detector.pt", trained.model, seed=0)


class TestParser:

    def test_unknown_attack_is_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["attack", "ckpt.pt", "data", "--attack", "cw"])
        assert excinfo.value.code == 2

    def test_negative_radius_is_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["sweep-radius", "ckpt.pt", "data", "--radii", "4,-1"])
        assert excinfo.value.code == 2

    def test_negative_seed_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as excinfo:
            main(["generate", "--out", str(tmp_path / "data"), "--seed", "-1"])
        assert excinfo.value.code == 2

    def test_radii_parsed(self):
        args = build_parser().parse_args(["sweep-radius", "ckpt.pt", "data", "--radii", "0, 8,16"])
        assert args.radii == [0, 8, 16]

    def test_default_variant_is_jpeg(self):
        args = build_parser().parse_args(["transfer", "runs/fla", "a.pt", "b.pt"])
        assert args.variant == "jpeg"
        assert len(args.targets) == 2


class TestCommands:

    def test_generate(self, tmp_path, capsys):
        out = tmp_path / "data"
        status = main(["generate", "--out", str(out), "--n-train", "4", "--n-test", "2",
                       "--image-size", "64", "--seed", "5"])

        assert status == EXIT_OK
        assert len(list((out / "train" / "images").glob("*.png"))) == 4
        assert len(list((out / "test" / "images").glob("*.png"))) == 2
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert manifest["seeds"]["dataset"] == 5
        assert "torch" in manifest["versions"]
        assert manifest["environment"]["BUDGET"] == pytest.approx(32 / 255)
        assert str(out / "manifest.json") in capsys.readouterr().out

    def test_missing_config_file(self, tmp_path):
        status = main(["generate", "--out", str(tmp_path / "data"), "--config", str(tmp_path / "absent.cfg")])
        assert status == EXIT_USAGE

    def test_train_on_missing_dataset(self, tmp_path):
        assert main(["train", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run")]) == EXIT_FAILURE

    def test_train_gate_failure_still_saves(self, tmp_path):
        write_splits(tmp_path / "data", 6, 3, seed=0, image_size=64)
        config = _config(tmp_path, SMALL_DETECTOR + "train.epochs=1\ntrain.batch_size=3\ntrain.map_gate=1.0\n")
        out = tmp_path / "run"

        status = main(["train", str(tmp_path / "data"), "--config", str(config), "--out", str(out)])

        assert status == EXIT_USAGE
        assert (out / "detector.pt").is_file()
        report = json.loads((out / "train_report.json").read_text())
        assert report["gate_passed"] is False
        assert len(report["history"]) == 1

    @pytest.mark.slow
    def test_train_is_reproducible_for_a_seed(self, tmp_path):
        write_splits(tmp_path / "data", 12, 3, seed=0, image_size=64)
        config = _config(tmp_path, SMALL_DETECTOR + "train.epochs=2\ntrain.batch_size=4\ntrain.map_gate=0.0\n")

        digests = []
        for name in ("first", "second"):
            out = tmp_path / name
            status = main(["train", str(tmp_path / "data"), "--config", str(config), "--out", str(out),
                           "--seed", "3"])
            assert status == EXIT_OK
            digests.append(sha256_file(out / "detector.pt"))

        assert digests[0] == digests[1]

    def test_transfer_without_origin_manifest(self, tmp_path, checkpoint):
        (tmp_path / "adv").mkdir()
        assert main(["transfer", str(tmp_path / "adv"), str(checkpoint)]) == EXIT_FAILURE

    def test_gradcheck(self, tmp_path, tiny_dataset, checkpoint):
        out = tmp_path / "grad"
        status = main(["gradcheck", str(checkpoint), str(tiny_dataset.directory), "--out", str(out),
                       "--images", "2", "--pixels", "3"])

        assert status == EXIT_OK
        rows = _read_csv(out / "gradcheck.csv")
        assert len(rows) == 6
        assert max(float(row["relative_error"]) for row in rows) < 1e-2

    def test_attack_on_empty_split(self, tmp_path, checkpoint):
        write_splits(tmp_path / "data", 2, 0, seed=0, image_size=64)
        status = main(["attack", str(checkpoint), str(tmp_path / "data"), "--out", str(tmp_path / "adv")])
        assert status == EXIT_USAGE


@pytest.mark.slow
class TestPipeline:

    def test_attack_then_self_transfer(self, tmp_path, trained, trained_checkpoint):
        adv = tmp_path / "fla"
        config = _config(tmp_path, "attack.max_iterations=20\n")
        status = main(["attack", str(trained_checkpoint), str(trained.root), "--out", str(adv),
                       "--limit", "8", "--config", str(config), "--workers", "2"])

        assert status == EXIT_OK
        report = json.loads((adv / "report.json").read_text())
        assert report["attack"] == "fla" and report["num_images"] == 8
        assert report["asr"] == pytest.approx(1 - report["map_attack"] / report["map_clean"])
        assert len(list((adv / "adversarial").glob("*.png"))) == 8
        assert len(list((adv / "adversarial_jpeg").glob("*.jpg"))) == 8
        assert len(list((adv / "traces").glob("*.csv"))) == 8
        manifest = json.loads((adv / "manifest.json").read_text())
        assert set(manifest["extra"]["variant_asr"]) == {"jpeg", "lossless"}

        for variant in ("jpeg", "lossless"):
            out = tmp_path / f"transfer_{variant}"
            status = main(["transfer", str(adv), str(trained_checkpoint), "--variant", variant, "--out", str(out)])
            assert status == EXIT_OK
            transfer = json.loads((out / "report.json").read_text())
            assert transfer["atr"] == pytest.approx(1.0)

    def test_fgsm_attack(self, tmp_path, trained, trained_checkpoint):
        adv = tmp_path / "fgsm"
        status = main(["attack", str(trained_checkpoint), str(trained.root), "--attack", "fgsm",
                       "--out", str(adv), "--limit", "4"])
        assert status == EXIT_OK
        report = json.loads((adv / "report.json").read_text())
        assert report["attack"] == "fgsm"
        assert report["mean_iterations"] <= 1.0
        assert not (adv / "traces").exists()

    def test_sweep_radius(self, tmp_path, trained, trained_checkpoint):
        out = tmp_path / "sweep"
        config = _config(tmp_path, "attack.max_iterations=10\n")
        status = main(["sweep-radius", str(trained_checkpoint), str(trained.root), "--radii", "0,8",
                       "--limit", "4", "--config", str(config), "--out", str(out), "--plot"])

        assert status == EXIT_OK
        rows = _read_csv(out / "sweep.csv")
        assert [int(row["attack_radius"]) for row in rows] == [0, 8]
        assert list(rows[0]) == ["attack_radius", "asr", "p_l0", "p_l2", "mean_time_s", "mean_iterations"]
        assert float(rows[0]["p_l0"]) <= float(rows[1]["p_l0"])
        assert (out / "sweep.png").is_file()
