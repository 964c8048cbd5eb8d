import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from wit.checkpoint import (Checkpoint, CheckpointError, ConfigError, decode_checkpoint,
                            encode_checkpoint, parse_config, read_checkpoint, schema_of,
                            write_checkpoint)
from wit.data import (DataError, ToyDatasetSpec, export_image, generate_toy_dataset,
                      load_image_folder, save_image_folder, to_uint8)
from wit.training import TrainConfig


def test_toy_dataset_deterministic_and_separable():
    spec = ToyDatasetSpec(samples_per_class=16)
    a, b = generate_toy_dataset(spec), generate_toy_dataset(spec)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.min() >= -1 and a.images.max() <= 1
    m0 = a.images[a.labels == 0].mean(0)
    m1 = a.images[a.labels == 1].mean(0)
    assert np.linalg.norm(m0 - m1) > 0.1
    assert a.images.shape == (64, 32, 32, 3)
    with pytest.raises(ValueError):
        ToyDatasetSpec(num_classes=1)
    with pytest.raises(ValueError):
        ToyDatasetSpec(image_size=30)


def test_export_rounding(tmp_path):
    assert to_uint8(np.array([0.0, -1.0, 2.0, 1.0, -5.0])).tolist() == [128, 0, 255, 255, 0]
    p = tmp_path / "black.png"
    export_image(-np.ones((4, 4, 3)), p)
    assert np.asarray(Image.open(p)).max() == 0
    with pytest.raises(DataError):
        export_image(np.zeros((4, 4)), p)


def test_export_load_roundtrip(tmp_path, gen):
    ds = generate_toy_dataset(ToyDatasetSpec(num_classes=2, image_size=8, patch_size=4, samples_per_class=3))
    save_image_folder(ds, tmp_path)
    back = load_image_folder(tmp_path, 8)
    assert np.array_equal(back.labels, ds.labels)
    assert np.abs(back.images - np.clip(ds.images, -1, 1)).max() <= 1 / 255 + 1e-6


def test_load_folder_rules(tmp_path):
    for name in ("b", "a"):
        (tmp_path / name).mkdir()
    Image.new("RGB", (1, 1), (255, 255, 255)).save(tmp_path / "a" / "white.png")
    Image.new("RGB", (6, 4), (0, 0, 0)).save(tmp_path / "b" / "wide.ppm")
    (tmp_path / "b" / "notes.txt").write_text("hi")
    (tmp_path / "b" / "broken.png").write_bytes(b"not a png")
    with pytest.warns(UserWarning):
        ds = load_image_folder(tmp_path, 1)
    assert ds.class_names == ["a", "b"]
    assert ds.labels.tolist() == [0, 1]
    assert ds.images[0].tolist() == [[[1.0, 1.0, 1.0]]]
    assert len(ds.skipped) == 2
    (tmp_path / "empty" / "c").mkdir(parents=True)
    with pytest.raises(DataError):
        load_image_folder(tmp_path / "empty", 4)


def _ckpt(tensors):
    return Checkpoint("pixel", {"model": {"depth": 2}, "note": "ünïcode"}, tensors)


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float32, st.tuples(st.integers(0, 3), st.integers(1, 4)),
                              elements=st.floats(-1e6, 1e6, width=32)), max_size=4))
def test_checkpoint_roundtrip_property(tensors):
    raw = encode_checkpoint(_ckpt(tensors))
    back = decode_checkpoint(raw)
    assert back.kind == "pixel" and back.config["note"] == "ünïcode"
    assert set(back.tensors) == set(tensors)
    for k, v in tensors.items():
        assert back.tensors[k].tobytes() == v.tobytes() and back.tensors[k].shape == v.shape
    assert encode_checkpoint(back) == raw


def test_checkpoint_file_and_errors(tmp_path, gen):
    ck = _ckpt({"w": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(3.5).reshape(())})
    p = tmp_path / "a.witc"
    write_checkpoint(p, ck)
    raw = p.read_bytes()
    assert raw[:4] == b"WITC" and struct.unpack("<I", raw[4:8])[0] == 1
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])
    back = read_checkpoint(p)
    assert back.tensors["s"].shape == () and back.tensors["w"][1, 2] == 5
    for cut in (3, 10, len(raw) - 1):
        with pytest.raises(CheckpointError) as exc:
            decode_checkpoint(raw[:cut])
        assert exc.value.field in ("length", "crc")
    bumped = raw[:4] + struct.pack("<I", 2) + raw[8:]
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bumped)
    with pytest.raises(CheckpointError) as exc:
        decode_checkpoint(b"XXXX" + raw[4:])
    assert exc.value.field == "magic"
    flipped = bytearray(raw)
    flipped[20] ^= 1
    with pytest.raises(CheckpointError) as exc:
        decode_checkpoint(bytes(flipped))
    assert exc.value.field == "crc"
    assert [f.name for f in tmp_path.iterdir()] == ["a.witc"]


def test_config_parsing():
    schema = schema_of(TrainConfig)
    out = parse_config("# comment\nbatch_size = 32\nbase_lr = 1e-3  # tail\nbetas = 0.9, 0.99\n"
                       "stage = pixel\n\n", schema)
    assert out == {"batch_size": 32, "base_lr": 1e-3, "betas": (0.9, 0.99), "stage": "pixel"}
    assert TrainConfig(**out).betas == (0.9, 0.99)
    for bad in ("bogus = 1", "batch_size = x", "batch_size 3", "seed = 1\nseed = 2"):
        with pytest.raises(ConfigError):
            parse_config(bad, schema)
