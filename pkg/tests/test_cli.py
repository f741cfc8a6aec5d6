import json

import numpy as np
import pytest

from cosmix import dataset as ds
from cosmix import runconfig as rc
from cosmix.cli import main
from cosmix.errors import ConfigError


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata")
    ds.synth_dataset(root, n_per_class=20, noise_level=0.1, seed=5)
    return root


@pytest.fixture(scope="module")
def manifest_file(corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("manifests") / "all.tsv"
    manifest = ds.build_manifest(corpus)
    # synthetic corpora carry split tags in their own manifest; rebuild them
    manifest = ds.synth_dataset(corpus, n_per_class=20, noise_level=0.1, seed=5)
    ds.write_manifest(path, manifest)
    return path


FAST_CONFIG = """
# desk-scale run
batch_size = 16
epochs = 2
seed = 3
model_channels = 2,3
"""


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.cfg"
    path.write_text(FAST_CONFIG)
    return path


class TestRunConfig:
    def test_defaults_round_trip(self):
        settings = rc.default_settings()
        parsed = rc.parse_config(rc.format_config(settings))
        assert parsed == settings

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="warp_speed"):
            rc.parse_config("warp_speed = 9\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            rc.parse_config("epochs = 2\nepochs = 3\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="epochs"):
            rc.parse_config("epochs = soon\n")

    def test_comments_and_blanks_ok(self):
        settings = rc.parse_config("\n# hi\nepochs = 4  # trailing\n")
        assert settings.train.epochs == 4

    def test_every_field_is_covered(self):
        text = rc.format_config(rc.default_settings())
        keys = {line.split(" = ")[0] for line in text.splitlines()}
        import dataclasses
        from cosmix.augment import AugmentConfig
        from cosmix.model import ModelConfig
        from cosmix.trainer import TrainConfig
        expected = {f.name for f in dataclasses.fields(TrainConfig)}
        expected |= {f.name for f in dataclasses.fields(AugmentConfig)}
        expected |= {"model_" + f.name for f in dataclasses.fields(ModelConfig)}
        assert keys == expected

    def test_invalid_combination_rejected(self):
        with pytest.raises(ConfigError):
            rc.parse_config("mix_ratio = 1.5\n")


class TestPrepare:
    def test_writes_manifest_and_prints_counts(self, corpus, tmp_path, capsys):
        out = tmp_path / "manifest.tsv"
        code = main(["prepare", "--data-root", str(corpus), "--output", str(out),
                     "--fraction", "0.5", "--seed", "1"])
        assert code == 0
        printed = capsys.readouterr().out
        assert "utterances" in printed and "min" in printed
        manifest = ds.read_manifest(out, corpus)
        assert len(manifest.entries) > 0

    def test_invalid_root_exit_2_no_partial_file(self, tmp_path):
        out = tmp_path / "manifest.tsv"
        code = main(["prepare", "--data-root", str(tmp_path / "nope"),
                     "--output", str(out)])
        assert code == 2
        assert not out.exists()

    def test_fraction_one_equals_untrimmed(self, corpus, tmp_path):
        out = tmp_path / "m.tsv"
        assert main(["prepare", "--data-root", str(corpus), "--output", str(out)]) == 0
        manifest = ds.read_manifest(out, corpus)
        untrimmed = ds.build_manifest(corpus)
        assert len(manifest.entries) == len(untrimmed.entries)


class TestTrainEval:
    def test_full_cycle(self, corpus, manifest_file, config_file, tmp_path, capsys):
        run_dir = tmp_path / "run"
        code = main(["train", "--config", str(config_file),
                     "--manifest", str(manifest_file), "--data-root", str(corpus),
                     "--run-dir", str(run_dir), "--mode", "cosmix"])
        assert code == 0
        assert (run_dir / "config.resolved").exists()
        assert (run_dir / "best.ckpt").exists()
        lines = (run_dir / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert list(rec) == ["epoch", "loss_mix", "loss_cos", "loss_total",
                             "train_acc", "val_acc", "lr", "seconds"]

        capsys.readouterr()
        code = main(["eval", "--run-dir", str(run_dir),
                     "--manifest", str(manifest_file), "--data-root", str(corpus),
                     "--split", "validation"])
        assert code == 0
        printed = capsys.readouterr().out
        acc = float(printed.split()[1])
        best = max(json.loads(l)["val_acc"] for l in lines)
        assert acc == pytest.approx(best, abs=5e-5)
        confusion = (run_dir / "confusion_validation.csv").read_text().splitlines()
        assert len(confusion) == 10
        total = sum(int(x) for row in confusion for x in row.split(","))
        correct = sum(int(row.split(",")[i]) for i, row in enumerate(confusion))
        assert correct / total == pytest.approx(acc, abs=5e-5)

        code = main(["export-embeddings", "--run-dir", str(run_dir),
                     "--manifest", str(manifest_file), "--data-root", str(corpus),
                     "--split", "validation"])
        assert code == 0
        emb = (run_dir / "embeddings_validation.csv").read_text().splitlines()
        assert len(emb) == total
        assert all(len(l.split(",")) == 3 + 1 for l in emb)  # embed_dim 3

    def test_refuses_existing_run_dir(self, corpus, manifest_file, config_file,
                                      tmp_path):
        run_dir = tmp_path / "run"
        run_dir.mkdir()
        (run_dir / "junk.txt").write_text("x")
        code = main(["train", "--config", str(config_file),
                     "--manifest", str(manifest_file), "--data-root", str(corpus),
                     "--run-dir", str(run_dir)])
        assert code == 2

    def test_unknown_config_key_exit_2(self, corpus, manifest_file, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nonsense_knob = 5\n")
        code = main(["train", "--config", str(bad), "--manifest", str(manifest_file),
                     "--data-root", str(corpus), "--run-dir", str(tmp_path / "r")])
        assert code == 2
        assert "nonsense_knob" in capsys.readouterr().err

    def test_replay_from_resolved_config(self, corpus, manifest_file, config_file,
                                         tmp_path):
        run1 = tmp_path / "r1"
        main(["train", "--config", str(config_file), "--manifest", str(manifest_file),
              "--data-root", str(corpus), "--run-dir", str(run1)])
        run2 = tmp_path / "r2"
        main(["train", "--config", str(run1 / "config.resolved"),
              "--manifest", str(manifest_file), "--data-root", str(corpus),
              "--run-dir", str(run2)])
        m1 = [json.loads(l) for l in (run1 / "metrics.jsonl").read_text().splitlines()]
        m2 = [json.loads(l) for l in (run2 / "metrics.jsonl").read_text().splitlines()]
        for a, b in zip(m1, m2):
            a.pop("seconds")
            b.pop("seconds")
        assert m1 == m2


class TestAblate:
    def test_single_cell_grid(self, corpus, manifest_file, config_file, tmp_path,
                              capsys):
        run_dir = tmp_path / "sweep"
        code = main(["ablate", "--config", str(config_file),
                     "--manifest", str(manifest_file), "--data-root", str(corpus),
                     "--run-dir", str(run_dir), "--epochs", "1",
                     "--mix-ratios", "0.5", "--alphas", "10", "--modes", "mixup"])
        assert code == 0
        table = (run_dir / "ablation.csv").read_text().splitlines()
        assert table[0] == "mix_ratio,mixup@alpha=10"
        assert len(table) == 2
        cell = table[1].split(",")[1]
        assert 0.0 <= float(cell) <= 1.0

    def test_grid_shape_matches_request(self, corpus, manifest_file, config_file,
                                        tmp_path):
        run_dir = tmp_path / "sweep2"
        code = main(["ablate", "--config", str(config_file),
                     "--manifest", str(manifest_file), "--data-root", str(corpus),
                     "--run-dir", str(run_dir), "--epochs", "1",
                     "--mix-ratios", "0.3,0.7", "--alphas", "0.5,10",
                     "--modes", "mixup,cosmix"])
        assert code == 0
        table = (run_dir / "ablation.csv").read_text().splitlines()
        assert len(table) == 3  # header + 2 ratios
        assert len(table[1].split(",")) == 1 + 4  # ratio + 2 alphas x 2 modes


class TestVerifyCommand:
    def test_pristine_build_exits_zero(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "all" in out and "passed" in out
        names = [l.split()[0] for l in out.splitlines() if "max_err" in l]
        assert len(names) == len(set(names))  # every suite exactly once

    def test_sabotaged_conv_exits_one_naming_conv2d(self, capsys, monkeypatch):
        from cosmix.autodiff import SABOTAGE_ENV
        monkeypatch.setenv(SABOTAGE_ENV, "conv2d")
        assert main(["verify"]) == 1
        out = capsys.readouterr().out
        assert "conv2d" in out and "FAILED" in out
