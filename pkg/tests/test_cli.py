import csv

import numpy as np
import pytest

from oled.cli import main, parse_classes, read_run_config
from oled.datasets import parse_pgm

TINY = """\
# tiny network so the command tests stay fast
dataset = mnist
mnist_images = {images}
mnist_labels = {labels}
inlier_class = 1
out_dir = runs/tiny
epochs = 2
r_channels = 4,8,8
m_channels = 4,4
bottleneck = 16
"""


@pytest.fixture
def config(tmp_path, mnist_paths):
    path = tmp_path / "run.cfg"
    path.write_text(TINY.format(images=mnist_paths[0], labels=mnist_paths[1]))
    return path


def rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_train_writes_run_directory(config, tmp_path, capsys):
    assert main(["train", "--config", str(config), "--seed", "7"]) == 0
    run = tmp_path / "runs" / "tiny"
    assert {p.name for p in run.iterdir()} >= {"config.txt", "split.txt", "epochs.csv", "best_epoch.txt",
                                               "checkpoints", "train.log"}
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["epoch_001.ckpt", "epoch_002.ckpt"]
    resolved = read_run_config(run / "config.txt")
    assert resolved.train.seed == 7 and resolved.train.epochs == 2
    assert resolved.data["out_dir"] == str(run)
    assert "seed = 7" in (run / "split.txt").read_text()
    assert "best epoch" in capsys.readouterr().out


def test_train_rejects_unknown_key(config, capsys):
    config.write_text(config.read_text() + "learning_rate = 0.1\n")
    assert main(["train", "--config", str(config)]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_missing_dataset_path_is_named(config, tmp_path, capsys):
    missing = tmp_path / "nowhere" / "images.idx"
    text = "\n".join(f"mnist_images = {missing}" if line.startswith("mnist_images") else line
                     for line in config.read_text().splitlines())
    config.write_text(text + "\n")
    assert main(["train", "--config", str(config)]) != 0
    assert str(missing) in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "absent.cfg")]) == 1
    assert "absent.cfg" in capsys.readouterr().err


def test_train_is_reproducible(config, tmp_path):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "epochs.csv").read_bytes() == (tmp_path / "b" / "epochs.csv").read_bytes()


def test_eval_outputs(config, tmp_path):
    run = tmp_path / "runs" / "tiny"
    assert main(["train", "--config", str(config)]) == 0
    assert main(["eval", "--run", str(run)]) == 0
    metrics = rows(run / "metrics.csv")
    assert metrics[0] == ["score_type", "auc", "eer", "n_inlier", "n_outlier"]
    assert [r[0] for r in metrics[1:]] == ["rec", "mask", "cont", "avg"]
    assert all(0 <= float(r[1]) <= 1 for r in metrics[1:])
    first = (run / "metrics.csv").read_bytes(), (run / "scores.csv").read_bytes()
    assert main(["eval", "--run", str(run)]) == 0
    assert ((run / "metrics.csv").read_bytes(), (run / "scores.csv").read_bytes()) == first
    assert len(rows(run / "scores.csv")) == 1 + 167 + 72
    assert main(["eval", "--run", str(run), "--score-type", "mask", "--out", str(tmp_path / "m")]) == 0
    assert [r[0] for r in rows(tmp_path / "m" / "metrics.csv")[1:]] == ["mask"]


def test_eval_without_checkpoint(tmp_path, capsys):
    assert main(["eval", "--run", str(tmp_path)]) == 1
    assert "best_epoch.txt" in capsys.readouterr().err


def test_mask_preview_grid(config, tmp_path):
    run = tmp_path / "runs" / "tiny"
    main(["train", "--config", str(config)])
    assert main(["mask-preview", "--run", str(run), "--n", "3"]) == 0
    grid = parse_pgm(run / "mask_preview.pgm")
    assert grid.shape == (3 * 32, 3 * 32)
    masked = grid[:, 32:64]
    # 128 masked pixels per sample render at mid-gray 128 (value 0 in [-1, 1])
    assert all((masked[i * 32:(i + 1) * 32] == 128).sum() >= 128 for i in range(3))


def test_segment_eval(config, tmp_path):
    run = tmp_path / "runs" / "tiny"
    main(["train", "--config", str(config)])
    assert main(["segment-eval", "--run", str(run)]) == 0
    table = rows(run / "segmentation.csv")
    assert table[0] == ["group", "mean_pixel_auc", "n_images", "n_skipped"]
    assert [r[0] for r in table[1:]] == ["inlier", "outlier"]
    assert int(table[1][2]) + int(table[1][3]) == 167


def test_mnist_suite_averages_requested_classes(config, tmp_path):
    config.write_text(config.read_text().replace("epochs = 2", "epochs = 1"))
    assert main(["mnist-suite", "--config", str(config), "--classes", "1,8"]) == 0
    table = rows(tmp_path / "runs" / "tiny" / "suite.csv")
    assert table[0] == ["score_type", "class_1", "class_8", "average_1_8"]
    assert [r[0] for r in table[1:]] == ["rec", "mask", "cont", "avg"]
    for r in table[1:]:
        assert float(r[3]) == pytest.approx((float(r[1]) + float(r[2])) / 2)


def test_ablate_cae_pairs_rows(config, tmp_path):
    config.write_text(config.read_text().replace("epochs = 2", "epochs = 1"))
    assert main(["ablate-cae", "--config", str(config), "--class", "8", "--seed", "2"]) == 0
    table = rows(tmp_path / "runs" / "tiny" / "ablation.csv")
    assert table[0] == ["model", "seed", "score_type", "auc", "eer"]
    pairs = {(r[0], r[2]) for r in table[1:]}
    assert pairs == {(m, s) for m in ("oled", "cae") for s in ("rec", "mask", "cont", "avg")}
    assert {r[1] for r in table[1:]} == {"2"}


def test_bad_thread_setting(config, monkeypatch, capsys):
    monkeypatch.setenv("OLED_THREADS", "zero")
    assert main(["train", "--config", str(config)]) == 1
    assert "OLED_THREADS" in capsys.readouterr().err


def test_parse_classes():
    assert parse_classes("0..9") == list(range(10))
    assert parse_classes("1,8") == [1, 8]
    assert parse_classes("2-4") == [2, 3, 4]
    with pytest.raises(ValueError):
        parse_classes("10")


def test_config_paths_resolve_relative_to_file(tmp_path, mnist_paths):
    sub = tmp_path / "cfgdir"
    sub.mkdir()
    (sub / "r.cfg").write_text("out_dir = out\nmnist_images = ../x.idx\n")
    rc = read_run_config(sub / "r.cfg")
    assert rc.data["out_dir"] == str(sub / "out")
    assert rc.data["mnist_images"] == str(tmp_path / "x.idx")
    assert np.isclose(rc.train.t, 0.875)
