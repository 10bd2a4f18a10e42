import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatmil.bags import BagOfPatches
from heatmil.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from heatmil.errors import FormatError, LayoutError
from heatmil.formats import (
    atomic_write,
    decode_bag,
    decode_pgm,
    encode_bag,
    encode_pgm,
    load_split,
    read_bag,
    read_manifest,
    read_mask,
    write_bag,
    write_dataset,
    write_mask,
    write_pgm,
)
from heatmil.model import ModelParams
from heatmil.synthetic import SynthConfig, generate_synthetic

from helpers import toy_bag, toy_config


def same_bag(a, b):
    return (a.bag_id == b.bag_id and np.array_equal(a.embeddings, b.embeddings) and a.embeddings.dtype == b.embeddings.dtype
            and np.array_equal(a.coords, b.coords) and np.array_equal(a.labels, b.labels)
            and ((a.mask is None and b.mask is None) or np.array_equal(a.mask, b.mask)))


def small_bag(seed=0, mask=True, labels=(1, 0)):
    rng = np.random.default_rng(seed)
    cfg = toy_config(embed_dim=2, proj_dim=2)
    bag = toy_bag(rng, cfg, coords=[(1, 0), (0, 1)], patch=(2, 3), labels=labels, mask=mask, bag_id="b-7")
    return BagOfPatches(bag.bag_id, bag.embeddings.astype(np.float32), bag.coords, bag.labels, bag.mask)


# ---------------------------------------------------------------- IEB1 bags


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.integers(1, 11), st.booleans(), st.text(max_size=12))
def test_bag_roundtrip(seed, labels, with_mask, bag_id):
    rng = np.random.default_rng(seed)
    cfg = toy_config(num_labels=labels, embed_dim=3, proj_dim=3)
    coords = rng.permutation([(r, c) for r in range(3) for c in range(2)])[: rng.integers(1, 7)]
    bag = toy_bag(rng, cfg, coords=coords, patch=(2, 2), mask=with_mask, bag_id=bag_id)
    bag = BagOfPatches(bag.bag_id, bag.embeddings.astype(np.float32), bag.coords, bag.labels, bag.mask)
    buf = encode_bag(bag)
    out = decode_bag(buf)
    assert same_bag(bag, out)
    assert encode_bag(out) == buf


def test_bag_file_roundtrip(tmp_path):
    bag = small_bag()
    write_bag(tmp_path / "a.ieb", bag)
    assert same_bag(read_bag(tmp_path / "a.ieb"), bag)
    assert os.listdir(tmp_path) == ["a.ieb"]


def test_label_bits_little_endian():
    bag = small_bag(mask=False, labels=(1, 0))
    buf = encode_bag(bag)
    off = 4 + 8 + len(b"b-7") + 16
    assert buf[off] == 0b01


def test_every_truncation_rejected():
    buf = encode_bag(small_bag())
    for n in range(len(buf)):
        with pytest.raises(FormatError):
            decode_bag(buf[:n])


def test_header_errors_carry_offsets():
    buf = encode_bag(small_bag())
    with pytest.raises(FormatError) as e:
        decode_bag(b"XXXX" + buf[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        decode_bag(buf[:4] + struct.pack("<I", 2) + buf[8:])
    assert e.value.offset == 4
    with pytest.raises(FormatError, match="trailing"):
        decode_bag(buf + b"\x00")
    with pytest.raises(FormatError, match="mask flag"):
        decode_bag(encode_bag(small_bag(mask=False))[:-1] + b"\x02")


def test_bad_mask_bytes_and_extent():
    buf = bytearray(encode_bag(small_bag()))
    buf[-1] = 7
    with pytest.raises(FormatError):
        decode_bag(bytes(buf))
    bag = small_bag(mask=False)
    raw = encode_bag(bag)[:-1] + b"\x01" + struct.pack("<II", 3, 3) + bytes(2 * 9)
    with pytest.raises(FormatError):
        decode_bag(raw)


def test_duplicate_coordinates_rejected():
    bag = small_bag(mask=False)
    buf = bytearray(encode_bag(bag))
    first = buf.index(struct.pack("<II", 1, 0))
    second = buf.index(struct.pack("<II", 0, 1), first + 8)
    buf[second:second + 8] = struct.pack("<II", 1, 0)
    with pytest.raises(LayoutError):
        decode_bag(bytes(buf))


@settings(max_examples=150)
@given(st.integers(0, 10**6), st.integers(0, 255))
def test_corruption_never_crashes(pos, byte):
    buf = bytearray(encode_bag(small_bag()))
    buf[pos % len(buf)] = byte
    try:
        decode_bag(bytes(buf))
    except (FormatError, LayoutError):
        pass


# ---------------------------------------------------------------- PGM


@pytest.mark.parametrize("img", [np.zeros((3, 5), np.uint8),
                                 (np.indices((6, 4)).sum(axis=0) % 2 * 255).astype(np.uint8),
                                 np.arange(256, dtype=np.uint8).reshape(16, 16)])
def test_pgm_roundtrip(img, tmp_path):
    write_pgm(tmp_path / "x.pgm", img)
    assert np.array_equal(decode_pgm((tmp_path / "x.pgm").read_bytes()), img)
    assert encode_pgm(img).startswith(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())


def test_pgm_header_comments_and_maxval():
    buf = b"P5\n# made by hand\n2 # width\n1\n15\n" + bytes([3, 15])
    assert decode_pgm(buf).tolist() == [[3, 15]]
    with pytest.raises(FormatError):
        decode_pgm(b"P5\n2 1\n15\n" + bytes([3, 16]))


@pytest.mark.parametrize("buf", [
    b"P2\n2 1\n255\n1 2",
    b"P5\n2 2\n255\n" + bytes(3),
    b"P5\n2 2\n255\n" + bytes(5),
    b"P5\n2 2\n65535\n" + bytes(8),
    b"P5\n2 x\n255\n" + bytes(4),
    b"P5\n0 2\n255\n",
    b"",
    b"\x89PNG\r\n",
])
def test_pgm_rejects(buf):
    with pytest.raises(FormatError):
        decode_pgm(buf)


def test_mask_roundtrip_and_strictness(tmp_path):
    m = np.random.default_rng(0).random((7, 9)) < 0.4
    write_mask(tmp_path / "m.pgm", m)
    assert np.array_equal(read_mask(tmp_path / "m.pgm"), m)
    write_pgm(tmp_path / "bad.pgm", np.full((2, 2), 128, np.uint8))
    with pytest.raises(FormatError):
        read_mask(tmp_path / "bad.pgm")


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    params = ModelParams.init(toy_config(alpha=3.0, pooling_mode="lp", lp_p=4.0), seed=5)
    save_checkpoint(tmp_path / "m.insm", params)
    loaded = load_checkpoint(tmp_path / "m.insm")
    assert loaded.config == params.config and loaded.equals(params)
    assert encode_checkpoint(loaded) == (tmp_path / "m.insm").read_bytes()
    assert list(loaded.tensors) == list(params.tensors)


def test_checkpoint_rejects_malformed():
    buf = encode_checkpoint(ModelParams.init(toy_config(), seed=1))
    for n in range(0, len(buf), 7):
        with pytest.raises(FormatError):
            decode_checkpoint(buf[:n])
    with pytest.raises(FormatError):
        decode_checkpoint(b"IEB1" + buf[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(buf + b"\x00")
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:4] + struct.pack("<I", 9) + buf[8:])
    # a config that disagrees with the stored tensors
    n = struct.unpack("<I", buf[8:12])[0]
    cfg = json.loads(buf[12:12 + n])
    cfg["hidden_dim"] += 1
    raw = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:8] + struct.pack("<I", len(raw)) + raw + buf[12 + n:])


# ---------------------------------------------------------------- datasets and atomic writes


def test_dataset_roundtrip(tmp_path):
    ds = generate_synthetic(SynthConfig(num_train=4, num_val=2, num_test=3))
    manifest = write_dataset(tmp_path, ds.splits, ds.config.to_dict())
    assert read_manifest(tmp_path) == manifest
    for split, bags in ds.splits.items():
        loaded = load_split(tmp_path, split)
        assert len(loaded) == len(bags) and all(same_bag(a, b) for a, b in zip(bags, loaded))
    assert len(list((tmp_path / "masks").glob("*.pgm"))) == 9
    with pytest.raises(FormatError):
        load_split(tmp_path, "holdout")


def test_manifest_label_mismatch(tmp_path):
    ds = generate_synthetic(SynthConfig(num_train=2, num_val=1, num_test=1))
    manifest = write_dataset(tmp_path, ds.splits)
    manifest["splits"]["train"][0]["labels"] = [1 - manifest["splits"]["train"][0]["labels"][0]]
    with pytest.raises(FormatError):
        load_split(tmp_path, "train", manifest)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        read_manifest(tmp_path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write(tmp_path / "sub" / "f.bin", b"abc")
    atomic_write(tmp_path / "sub" / "f.bin", b"xyz")
    assert os.listdir(tmp_path / "sub") == ["f.bin"]
    assert (tmp_path / "sub" / "f.bin").read_bytes() == b"xyz"


@settings(max_examples=150)
@given(st.integers(0, 10**6), st.integers(0, 255))
def test_checkpoint_corruption_never_crashes(pos, byte):
    buf = bytearray(encode_checkpoint(ModelParams.init(toy_config(), seed=2)))
    buf[pos % len(buf)] = byte
    try:
        decode_checkpoint(bytes(buf))
    except FormatError:
        pass
