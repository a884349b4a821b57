import gzip
import struct

import numpy as np
import pytest

from oled.checkpoint import load_checkpoint, load_into, model_entries, save_checkpoint
from oled.datasets import (
    RawDataset,
    build_cifar_protocol,
    build_mnist_protocol,
    build_ucsd_protocol,
    extract_patches,
    load_frame_dir,
    normalize,
    parse_cifar,
    parse_idx,
    parse_pgm,
    read_frame_labels,
    read_metadata,
    reassemble_patches,
    write_cifar,
    write_idx,
    write_pgm,
)
from oled.errors import CheckpointError, ConfigError, FormatError
from oled.scoring import score_samples
from oled.training import TrainConfig, build_models


# --- IDX --------------------------------------------------------------------

def test_idx_handcrafted_image_file(tmp_path):
    p = tmp_path / "img"
    p.write_bytes(bytes([0, 0, 8, 3]) + struct.pack(">3i", 1, 2, 2) + bytes([0, 64, 128, 255]))
    arr = parse_idx(p)
    assert arr.shape == (1, 2, 2)
    np.testing.assert_array_equal(arr[0], [[0, 64], [128, 255]])


def test_idx_handcrafted_label_file(tmp_path):
    p = tmp_path / "lab"
    p.write_bytes(bytes([0, 0, 8, 1]) + struct.pack(">i", 3) + bytes([7, 0, 9]))
    np.testing.assert_array_equal(parse_idx(p), [7, 0, 9])


def test_idx_gzip_and_writer_roundtrip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (5, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "a.gz", imgs)
    with gzip.open(tmp_path / "a.gz") as f:
        assert f.read(4) == bytes([0, 0, 8, 3])
    np.testing.assert_array_equal(parse_idx(tmp_path / "a.gz"), imgs)


@pytest.mark.parametrize("payload,match", [
    (bytes([0, 0, 8, 3]) + struct.pack(">3i", 1, 2, 2) + bytes(3), "truncated payload"),
    (bytes([0, 0, 8, 1]) + struct.pack(">i", 2) + bytes(3), "trailing"),
    (bytes([0, 0, 8, 2]) + struct.pack(">2i", 1, 1) + bytes(1), "magic"),
    (bytes([0, 0, 8]), "too short"),
    (bytes([0, 0, 8, 3]) + struct.pack(">i", 1), "truncated IDX header"),
])
def test_idx_rejects_malformed(tmp_path, payload, match):
    p = tmp_path / "bad"
    p.write_bytes(payload)
    with pytest.raises(FormatError, match=match):
        parse_idx(p)


# --- CIFAR ------------------------------------------------------------------

def cifar_record(label, fill=None):
    body = np.zeros(3072, np.uint8) if fill is None else fill
    return bytes([label]) + body.tobytes()


def test_cifar_two_records(tmp_path):
    body = np.zeros(3072, np.uint8)
    body[:1024] = 200  # red plane
    body[1024:2048] = 100
    p = tmp_path / "batch.bin"
    p.write_bytes(cifar_record(3, body) + cifar_record(9))
    raw = parse_cifar(p)
    assert raw.images.shape == (2, 3, 32, 32)
    np.testing.assert_array_equal(raw.labels, [3, 9])
    assert (raw.images[0, 0] == 200).all() and (raw.images[0, 1] == 100).all() and not raw.images[0, 2].any()


def test_cifar_rejects_bad_label_and_length(tmp_path):
    p = tmp_path / "b"
    p.write_bytes(cifar_record(11))
    with pytest.raises(FormatError, match="label 11"):
        parse_cifar(p)
    p.write_bytes(cifar_record(1)[:-1])
    with pytest.raises(FormatError, match="multiple of 3073"):
        parse_cifar(p)


def test_cifar_writer_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    raw = RawDataset(rng.integers(0, 256, (4, 3, 32, 32), dtype=np.uint8), np.array([0, 5, 9, 2]))
    write_cifar(tmp_path / "b.bin", raw)
    back = parse_cifar(tmp_path / "b.bin")
    np.testing.assert_array_equal(back.images, raw.images)
    np.testing.assert_array_equal(back.labels, raw.labels)


# --- PGM --------------------------------------------------------------------

def test_pgm_minimal(tmp_path):
    p = tmp_path / "f.pgm"
    p.write_bytes(b"P5 2 2 255\n" + bytes([1, 2, 3, 4]))
    np.testing.assert_array_equal(parse_pgm(p), [[1, 2], [3, 4]])


def test_pgm_comments_skipped(tmp_path):
    p = tmp_path / "f.pgm"
    p.write_bytes(b"P5\n# made by hand\n3 1\n# another\n255\n" + bytes([9, 8, 7]))
    np.testing.assert_array_equal(parse_pgm(p), [[9, 8, 7]])


def test_pgm_rejects_ascii_and_wide(tmp_path):
    p = tmp_path / "f.pgm"
    p.write_bytes(b"P2 2 1 255\n1 2\n")
    with pytest.raises(FormatError, match="P5"):
        parse_pgm(p)
    p.write_bytes(b"P5 1 1 65535\n" + bytes(2))
    with pytest.raises(FormatError, match="maxval"):
        parse_pgm(p)
    p.write_bytes(b"P5 4 4 255\n" + bytes(5))
    with pytest.raises(FormatError, match="truncated"):
        parse_pgm(p)


def test_pgm_writer_roundtrip(tmp_path):
    frame = np.random.default_rng(0).integers(0, 256, (240, 360), dtype=np.uint8)
    write_pgm(tmp_path / "f.pgm", frame)
    np.testing.assert_array_equal(parse_pgm(tmp_path / "f.pgm"), frame)


# --- normalization and patches ---------------------------------------------

def test_normalize_endpoints():
    np.testing.assert_array_equal(normalize(np.array([0, 255], np.uint8)), [-1.0, 1.0])
    assert normalize(np.array([127.5]))[0] == 0.0
    assert normalize(np.zeros(1, np.uint8)).dtype == np.float32


def test_patch_grid():
    frame = np.arange(240 * 360).reshape(240, 360) % 251
    patches = extract_patches(frame, 30)
    assert patches.shape == (96, 30, 30)
    np.testing.assert_array_equal(patches[0], frame[:30, :30])
    np.testing.assert_array_equal(patches[13], frame[30:60, 30:60])
    assert reassemble_patches(patches, frame.shape).tobytes() == frame.tobytes()
    with pytest.raises(ValueError):
        extract_patches(np.zeros((31, 60)), 30)


# --- protocols --------------------------------------------------------------

def fake_mnist(per_class, big_class=None, big=0, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10), per_class)
    if big_class is not None:
        labels = np.r_[labels[labels != big_class], np.full(big, big_class)]
    images = rng.integers(0, 256, (labels.size, 28, 28), dtype=np.uint8)
    return RawDataset(images[:, None], labels)


def test_mnist_protocol_counts():
    raw = fake_mnist(200, big_class=3, big=6000)
    split = build_mnist_protocol(raw, 3, seed=0)
    m = split.meta
    assert (m["n_train"], m["n_test_inlier"], m["n_test_outlier"]) == (4000, 2000, 857)
    assert len(split.test_x) == 2857
    assert abs(split.test_y.mean() - 0.3) < 1e-3
    assert split.train.shape == (4000, 1, 32, 32)
    assert m["n_val_inlier"] == m["n_val_outlier"] == 200
    assert len(split.fit) == 3800


def test_mnist_protocol_labels_and_disjointness():
    raw = fake_mnist(300)
    split = build_mnist_protocol(raw, 8, seed=5)
    # recover source indices through the raw images (random uint8 images are unique)
    lookup = {raw.images[i, 0].tobytes(): i for i in range(len(raw))}
    crop = slice(2, 30)
    train_src = {lookup[np.round((t[0, crop, crop] + 1) * 127.5).astype(np.uint8).tobytes()] for t in split.train}
    test_src = [lookup[r.tobytes()] for r in split.test_raw]
    val_src = {lookup[np.round((v[0, crop, crop] + 1) * 127.5).astype(np.uint8).tobytes()] for v in split.val_x}
    assert all(raw.labels[i] == 8 for i in train_src)
    assert [int(raw.labels[i] != 8) for i in test_src] == split.test_y.tolist()
    assert not train_src & set(test_src)
    assert not val_src & set(test_src)
    assert (split.train[:, :, :2] == -1).all()


def test_mnist_protocol_deterministic_and_seeded():
    raw = fake_mnist(60)
    a, b, c = (build_mnist_protocol(raw, 1, seed=s) for s in (0, 0, 1))
    assert a.meta == b.meta
    np.testing.assert_array_equal(a.test_x, b.test_x)
    assert a.meta["hash_train"] != c.meta["hash_train"]


def test_mnist_protocol_errors():
    raw = fake_mnist(20)
    with pytest.raises(ConfigError):
        build_mnist_protocol(raw, 10)
    no_five = RawDataset(raw.images[raw.labels != 5], raw.labels[raw.labels != 5])
    with pytest.raises(ConfigError, match="absent"):
        build_mnist_protocol(no_five, 5)


def test_metadata_roundtrip(tmp_path):
    split = build_mnist_protocol(fake_mnist(30), 2)
    split.write_metadata(tmp_path / "split.txt")
    back = read_metadata(tmp_path / "split.txt")
    assert back == {k: str(v) for k, v in split.meta.items()}


def test_cifar_protocol_counts():
    rng = np.random.default_rng(0)
    train = RawDataset(np.zeros((50000, 3, 1, 1), np.uint8), np.repeat(np.arange(10), 5000))
    test = RawDataset(np.zeros((10000, 3, 1, 1), np.uint8), rng.permutation(np.repeat(np.arange(10), 1000)))
    # shape-agnostic counts; real images are 32x32 but counting does not depend on it
    split = build_cifar_protocol(train, test, 4, seed=0)
    assert len(split.train) == 5000 and len(split.test_x) == 10000
    assert (split.test_y == 0).sum() == 1000 and split.test_y.mean() == 0.9
    assert split.meta["n_val_outlier"] == 250


def test_ucsd_protocol(tmp_path):
    rng = np.random.default_rng(0)
    frames = [rng.integers(0, 256, (240, 360), dtype=np.uint8) for _ in range(4)]
    for i, f in enumerate(frames):
        write_pgm(tmp_path / f"f{i:03d}.pgm", f)
    (tmp_path / "labels.csv").write_text("frame,label\nf000.pgm,0\nf001.pgm,1\nf002.pgm,0\nf003.pgm,1\n")
    names, loaded = load_frame_dir(tmp_path)
    labels = read_frame_labels(tmp_path / "labels.csv", names)
    split = build_ucsd_protocol(loaded[:2], loaded, labels)
    assert split.patches_per_frame == 96
    assert split.train.shape == (192, 1, 32, 32) and split.test_x.shape == (384, 1, 32, 32)
    # edge padding keeps the 30x30 patch in the centre-ish top-left block
    np.testing.assert_array_equal(split.train[0, 0, 1:31, 1:31], normalize(frames[0][:30, :30]))
    (tmp_path / "labels.csv").write_text("frame,label\nf000.pgm,0\n")
    with pytest.raises(FormatError, match="f001.pgm"):
        read_frame_labels(tmp_path / "labels.csv", names)


# --- checkpoint -------------------------------------------------------------

def small_models(seed=0):
    cfg = TrainConfig(r_channels=(4, 8), bottleneck=8, m_channels=(4, 4), seed=seed)
    return build_models((1, 8, 8), cfg), cfg


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    models, cfg = small_models()
    for p in list(models.R.parameters().values()) + list(models.MM.generator.parameters().values()):
        p += np.float32(0.125)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model_entries(models.R, models.MM), cfg.to_dict())
    config, entries = load_checkpoint(path)
    assert config == {k: str(v) for k, v in cfg.to_dict().items()}
    fresh, _ = small_models(seed=9)
    load_into(entries, fresh.R, fresh.MM)
    for a, b in ((models.R, fresh.R), (models.MM.generator, fresh.MM.generator)):
        for k, v in a.state().items():
            assert v.tobytes() == b.state()[k].tobytes()
    x = np.random.default_rng(0).uniform(-1, 1, (6, 1, 8, 8)).astype(np.float32)
    s1, s2 = score_samples(models.R, models.MM, x), score_samples(fresh.R, fresh.MM, x)
    assert s1.e_mask.tobytes() == s2.e_mask.tobytes() and s1.e_rec.tobytes() == s2.e_rec.tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"w": np.arange(3, dtype=np.float32)}, {"a": 1})
    data = path.read_bytes()
    assert data[:8] == b"OLEDCKPT"
    assert struct.unpack("<I", data[8:12])[0] == 1
    assert np.arange(3, dtype="<f4").tobytes() in data


def test_checkpoint_detects_corruption(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"w": np.ones(10, np.float32)}, {"a": 1})
    data = bytearray(path.read_bytes())
    data[-40] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
