"""Dataset ingestion, checkpoint roundtrips, config, CLI surfaces."""

import json
import os

import numpy as np
import pytest

from frostnet.checkpoint import (load_checkpoint, save_checkpoint,
                                 save_for_int8)
from frostnet.cli import main as cli_main
from frostnet.config import RunConfig
from frostnet.data import (FILE_BYTES, TRAIN_FILES, TEST_FILE, ImageDataset,
                           augment, epoch_batches, load_cifar10, normalize,
                           resolve_dataset, synthetic_dataset)
from frostnet.arch import build_frostnet
from frostnet.metrics import write_metrics_csv
from frostnet.pipeline import (TrainRunReport, EpochRecord, convert_int8,
                               evaluate, prepare_qat, qat_train,
                               statassist_warmup)
from frostnet.optim import GradBoostSGD


def write_fake_cifar(root, seed=0):
    """Valid-format binary batch files with random content."""
    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    for name in TRAIN_FILES + [TEST_FILE]:
        rec = rng.integers(0, 256, size=(10000, 3073), dtype=np.int64)
        rec[:, 0] = rng.integers(0, 10, size=10000)
        rec.astype(np.uint8).tofile(os.path.join(root, name))


class TestCifarLoader:
    def test_canonical_files(self, tmp_path):
        write_fake_cifar(tmp_path)
        train, test = load_cifar10(str(tmp_path))
        assert len(train) == 50000 and len(test) == 10000
        assert train.images.shape == (50000, 3, 32, 32)
        assert train.images.dtype == np.uint8
        assert 0 <= train.labels.min() and train.labels.max() < 10

    def test_record_layout(self, tmp_path):
        # one handcrafted record: label byte then CHW pixel bytes
        root = tmp_path / "one"
        os.makedirs(root)
        rec = np.zeros((10000, 3073), np.uint8)
        rec[0, 0] = 7
        rec[0, 1] = 255          # first red pixel
        rec[0, 1 + 1024] = 128   # first green pixel
        for name in TRAIN_FILES + [TEST_FILE]:
            rec.tofile(os.path.join(root, name))
        train, _ = load_cifar10(str(root))
        assert train.labels[0] == 7
        assert train.images[0, 0, 0, 0] == 255
        assert train.images[0, 1, 0, 0] == 128

    def test_truncated_file_byte_count_error(self, tmp_path):
        write_fake_cifar(tmp_path)
        victim = os.path.join(tmp_path, TRAIN_FILES[2])
        with open(victim, "r+b") as f:
            f.truncate(FILE_BYTES - 13)
        with pytest.raises(ValueError, match=str(FILE_BYTES)):
            load_cifar10(str(tmp_path))

    def test_missing_file_has_instructions(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="download"):
            load_cifar10(str(tmp_path / "nope"))

    def test_resolve_prefers_real_data(self, tmp_path, monkeypatch):
        write_fake_cifar(tmp_path)
        monkeypatch.setenv("FROSTNET_DATA_ROOT", str(tmp_path))
        train, _ = resolve_dataset(None)
        assert train.source == "cifar10:train"

    def test_resolve_falls_back_to_synthetic(self, monkeypatch):
        monkeypatch.delenv("FROSTNET_DATA_ROOT", raising=False)
        train, _ = resolve_dataset(None, n_train=100, n_test=50)
        assert train.source == "synthetic:train"
        assert len(train) == 100


class TestBatching:
    def test_seeded_shuffle_reproducible(self):
        train, _ = synthetic_dataset(n_train=300, n_test=10, seed=2)
        a = [y[0] for _, y in epoch_batches(train, 50, 3, seed=9, train=True)]
        b = [y[0] for _, y in epoch_batches(train, 50, 3, seed=9, train=True)]
        c = [y[0] for _, y in epoch_batches(train, 50, 4, seed=9, train=True)]
        assert a == b
        assert a != c

    def test_normalization_stats(self):
        imgs = np.full((10, 3, 32, 32), 128, np.uint8)
        x = normalize(imgs)
        assert x.dtype == np.float32
        assert abs(float(x[:, 0].mean()) - (128 / 255 - 0.4914) / 0.2470) < 1e-5

    def test_augment_preserves_shape_and_range(self, rng):
        imgs = rng.integers(0, 256, (16, 3, 32, 32)).astype(np.uint8)
        out = augment(imgs, np.random.default_rng(0))
        assert out.shape == imgs.shape and out.dtype == np.uint8

    def test_eval_batches_ordered(self):
        train, _ = synthetic_dataset(n_train=130, n_test=10, seed=2)
        ys = np.concatenate([y for _, y in epoch_batches(train, 64, 0, 0,
                                                         train=False)])
        np.testing.assert_array_equal(ys, train.labels)

    def test_synthetic_determinism(self):
        a, _ = synthetic_dataset(n_train=50, n_test=10, seed=5)
        b, _ = synthetic_dataset(n_train=50, n_test=10, seed=5)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)


def _short_qat_model(train, epochs=1, seed=0):
    model = build_frostnet("cifar", 0.5, 10, 32, seed=seed)
    opt = GradBoostSGD(model.parameters(), lr=0.05, momentum=0.9, seed=seed + 1)

    def data_fn(e):
        return epoch_batches(train, 100, e, seed=4, train=True)

    statassist_warmup(model, opt, data_fn, 1)
    prepare_qat(model)
    qat_train(model, opt, data_fn, epochs, epoch_offset=1)
    return model


class TestCheckpoint:
    @pytest.fixture(scope="class")
    def data(self):
        return synthetic_dataset(n_train=400, n_test=150, seed=13)

    def test_fp_roundtrip_bitwise(self, data, tmp_path):
        train, _ = data
        model = build_frostnet("cifar", 0.5, 10, 32, seed=3)
        save_checkpoint(model, tmp_path / "ckpt")
        loaded, manifest = load_checkpoint(tmp_path / "ckpt")
        assert manifest["mode"] == "fp"
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert np.array_equal(a.data, b.data), a.name

    def test_int8_reload_identical_accuracy(self, data, tmp_path):
        train, test = data
        model = _short_qat_model(train)
        save_for_int8(model, tmp_path / "q")
        convert_int8(model)
        acc_direct = evaluate(model, test)
        loaded, manifest = load_checkpoint(tmp_path / "q", expect_mode="int8")
        assert manifest["mode"] == "int8"
        assert evaluate(loaded, test) == acc_direct

    def test_mode_mismatch_rejected(self, data, tmp_path):
        train, _ = data
        model = build_frostnet("cifar", 0.5, 10, 32)
        save_checkpoint(model, tmp_path / "fp")
        with pytest.raises(ValueError, match="fp.*int8|int8.*fp"):
            load_checkpoint(tmp_path / "fp", expect_mode="int8")

    def test_version_mismatch_rejected(self, data, tmp_path):
        model = build_frostnet("cifar", 0.5, 10, 32)
        save_checkpoint(model, tmp_path / "v")
        mpath = tmp_path / "v" / "manifest.json"
        m = json.loads(mpath.read_text())
        m["version"] = 99
        mpath.write_text(json.dumps(m))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(tmp_path / "v")

    def test_corrupt_blob_diagnosed(self, data, tmp_path):
        model = build_frostnet("cifar", 0.5, 10, 32)
        save_checkpoint(model, tmp_path / "c")
        blob = tmp_path / "c" / "tensors.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(ValueError, match="bytes"):
            load_checkpoint(tmp_path / "c")


class TestRunConfig:
    def test_roundtrip(self, tmp_path):
        cfg = RunConfig(variant="small", width_mult=0.75, qat_epochs=3,
                        milestones=(2, 4))
        cfg.save(tmp_path / "c.json")
        back = RunConfig.load(tmp_path / "c.json")
        assert back == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            RunConfig.from_dict({"not_a_field": 1})

    def test_qat_epoch_validation(self):
        cfg = RunConfig(fp_warmup_epochs=0, qat_epochs=0)
        with pytest.raises(ValueError):
            cfg.validate("qat")

    def test_schedules(self):
        cfg = RunConfig(schedule="constant", lr=0.1, fp_warmup_epochs=1,
                        qat_epochs=9)
        assert cfg.lr_at(7) == 0.1
        cfg = RunConfig(schedule="step", lr=1.0, milestones=(5,),
                        fp_warmup_epochs=1, qat_epochs=9)
        assert cfg.lr_at(6) == pytest.approx(0.1)


class TestMetrics:
    def test_csv_reproducible_and_shaped(self, tmp_path):
        def build():
            rep = TrainRunReport()
            rep.add(EpochRecord(0, "fp", 1.25, 0.3, 0.05, 3.3,
                                {"stem": {"zero_fraction": 0.01,
                                          "median_abs": 2e-4}}))
            rep.add(EpochRecord(1, "qat", 0.75, 0.6, 0.04, 9.9,
                                {"stem": {"zero_fraction": 0.02,
                                          "median_abs": 1e-4}}))
            return rep

        p1 = write_metrics_csv(build(), tmp_path / "m1.csv", {"acc": "0.6"})
        p2 = write_metrics_csv(build(), tmp_path / "m2.csv", {"acc": "0.6"})
        b1, b2 = open(p1, "rb").read(), open(p2, "rb").read()
        assert b1 == b2           # wall-clock excluded: bitwise identical
        lines = b1.decode().strip().split("\n")
        assert lines[0].startswith("epoch,phase,loss,acc,lr,median_grad_stem")
        assert lines[-1].startswith("summary")


class TestCli:
    def test_count_passthrough(self, capsys):
        assert cli_main(["count", "--variant", "base"]) == 0
        out = capsys.readouterr().out
        assert "4.997M params" in out and "382.6M MACs" in out

    def test_qat_epoch_validation_error(self, capsys):
        rc = cli_main(["qat", "--fp-warmup-epochs", "0", "--qat-epochs", "0"])
        assert rc == 2
        assert "fp_warmup_epochs" in capsys.readouterr().err

    def test_train_and_eval_roundtrip(self, tmp_path, capsys):
        out_dir = str(tmp_path / "run")
        rc = cli_main(["train", "--n-train", "200", "--n-test", "100",
                       "--batch-size", "50", "--fp-warmup-epochs", "1",
                       "--qat-epochs", "0", "--out-dir", out_dir])
        assert rc == 0
        for artifact in ("metrics.csv", "report.json", "config.json",
                         "training.png", "gradient_health.png",
                         "checkpoint_fp/manifest.json"):
            assert os.path.exists(os.path.join(out_dir, artifact)), artifact
        rc = cli_main(["eval", "--checkpoint",
                       os.path.join(out_dir, "checkpoint_fp"),
                       "--n-train", "200", "--n-test", "100"])
        assert rc == 0
        assert "top-1" in capsys.readouterr().out

    def test_missing_dataset_dir_instructions(self, capsys, tmp_path):
        rc = cli_main(["train", "--dataset-dir", str(tmp_path / "missing"),
                       "--fp-warmup-epochs", "1", "--qat-epochs", "0"])
        assert rc == 2
        assert "download" in capsys.readouterr().err
