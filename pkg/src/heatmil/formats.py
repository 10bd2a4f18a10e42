"""On-disk formats: IEB1 embedding bags, 8-bit PGM images/masks and the
dataset manifest.

IEB1 layout (all integers unsigned little-endian, reals float32 LE)::

    offset  size            field
    0       4               magic b"IEB1"
    4       4  u32          format version (1)
    8       4  u32          bag id length L
    12      L               bag id, UTF-8
    ..      4  u32 x 4      embed_dim, patch_h, patch_w, num_labels C
    ..      ceil(C/8)       label bits, label c at bit (c % 8) of byte c // 8
    ..      4  u32          patch count N
    ..      N records       row u32, col u32, embed_dim*patch_h*patch_w float32 (C-order)
    ..      1  u8           mask flag (0 or 1)
    ..      [if flag]       height u32, width u32, C*height*width bytes of 0/1
    EOF
"""
from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np

from .bags import BagOfPatches
from .errors import DimensionError, FormatError

IEB_MAGIC = b"IEB1"
IEB_VERSION = 1


def atomic_write(path, data: bytes):
    """Write ``data`` to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def encode_bag(bag: BagOfPatches) -> bytes:
    e, h, w = bag.embeddings.shape[1:]
    c = bag.num_labels
    bid = bag.bag_id.encode("utf-8")
    parts = [IEB_MAGIC, struct.pack("<II", IEB_VERSION, len(bid)), bid, struct.pack("<IIII", e, h, w, c)]
    bits = np.zeros(-(-c // 8) * 8, dtype=np.uint8)
    bits[:c] = bag.labels
    parts.append(np.packbits(bits, bitorder="little").tobytes())
    parts.append(struct.pack("<I", bag.num_patches))
    emb = bag.embeddings.astype("<f4", copy=False)
    for (r, q), x in zip(bag.coords, emb):
        parts.append(struct.pack("<II", int(r), int(q)))
        parts.append(np.ascontiguousarray(x).tobytes())
    if bag.mask is None:
        parts.append(b"\x00")
    else:
        mh, mw = bag.mask.shape[1:]
        parts.append(b"\x01" + struct.pack("<II", mh, mw))
        parts.append(bag.mask.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_bag(buf: bytes) -> BagOfPatches:
    rd = _Reader(buf)
    if rd.take(4, "magic") != IEB_MAGIC:
        raise FormatError("bad magic, expected b'IEB1'", 0)
    ver_at = rd.pos
    version = rd.u32("version")
    if version != IEB_VERSION:
        raise FormatError(f"unsupported IEB version {version}", ver_at)
    n_id = rd.u32("bag id length")
    id_at = rd.pos
    try:
        bag_id = rd.take(n_id, "bag id").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("bag id is not valid UTF-8", id_at) from None
    dims_at = rd.pos
    e, h, w, c = (rd.u32(n) for n in ("embed_dim", "patch_h", "patch_w", "num_labels"))
    if min(e, h, w, c) == 0:
        raise FormatError("zero extent in header", dims_at)
    bits = np.frombuffer(rd.take(-(-c // 8), "label bits"), dtype=np.uint8)
    labels = np.unpackbits(bits, bitorder="little")[:c].astype(np.int64)
    n_at = rd.pos
    n = rd.u32("patch count")
    if n == 0:
        raise FormatError("bag has no patches", n_at)
    per = e * h * w
    if n * (8 + 4 * per) > len(buf) - rd.pos:
        raise FormatError(f"truncated file: {n} patches declared", n_at)
    coords = np.empty((n, 2), dtype=np.int64)
    emb = np.empty((n, e, h, w), dtype=np.float32)
    for i in range(n):
        coords[i] = struct.unpack("<II", rd.take(8, f"coordinates of patch {i}"))
        emb[i] = np.frombuffer(rd.take(4 * per, f"embedding of patch {i}"), dtype="<f4").reshape(e, h, w)
    flag_at = rd.pos
    flag = rd.take(1, "mask flag")[0]
    mask = None
    if flag == 1:
        mh, mw = rd.u32("mask height"), rd.u32("mask width")
        mask_at = rd.pos
        raw = np.frombuffer(rd.take(c * mh * mw, "mask"), dtype=np.uint8)
        if raw.size and raw.max() > 1:
            raise FormatError("mask bytes must be 0 or 1", mask_at)
        mask = raw.reshape(c, mh, mw).astype(bool)
    elif flag != 0:
        raise FormatError(f"mask flag must be 0 or 1, got {flag}", flag_at)
    if rd.pos != len(buf):
        raise FormatError("trailing bytes after bag", rd.pos)
    try:
        return BagOfPatches(bag_id, emb, coords, labels, mask)
    except DimensionError as exc:
        raise FormatError(str(exc), flag_at) from None


def write_bag(path, bag: BagOfPatches):
    atomic_write(path, encode_bag(bag))


def read_bag(path) -> BagOfPatches:
    return decode_bag(Path(path).read_bytes())


# ---------------------------------------------------------------- PGM

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM export needs a 2-D uint8 array")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(buf, pos)
        if not m:
            raise FormatError("malformed PGM header", pos)
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError("not a binary PGM (P5) file", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric PGM header field", pos) from None
    if w <= 0 or h <= 0:
        raise FormatError("PGM extents must be positive", pos)
    if not 0 < maxval <= 255:
        raise FormatError(f"only 8-bit PGM is supported (maxval {maxval})", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError("missing whitespace after PGM header", pos)
    pos += 1
    payload = buf[pos:]
    if len(payload) != w * h:
        raise FormatError(f"PGM payload has {len(payload)} bytes, header declares {w}x{h}", pos)
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()
    if img.max(initial=0) > maxval:
        raise FormatError("pixel value exceeds maxval", pos)
    return img


def write_pgm(path, image: np.ndarray):
    atomic_write(path, encode_pgm(image))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_mask(path, mask: np.ndarray):
    write_pgm(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask(path) -> np.ndarray:
    img = read_pgm(path)
    if not np.all((img == 0) | (img == 255)):
        raise FormatError("mask pixels must be 0 or 255")
    return img == 255


# ---------------------------------------------------------------- manifest

MANIFEST_NAME = "manifest.json"


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()


def write_dataset(root, splits: dict[str, list[BagOfPatches]], synth_config: dict | None = None,
                  masks_as_pgm: bool = True) -> dict:
    """Write IEB1 bags (masks as separate PGM files) plus ``manifest.json``."""
    root = Path(root)
    entries = {}
    first = next(b for bags in splits.values() for b in bags)
    for split, bags in splits.items():
        rows = []
        for bag in bags:
            rel = f"bags/{bag.bag_id}.ieb"
            masks = None
            if bag.mask is not None and masks_as_pgm:
                masks = []
                for c, m in enumerate(bag.mask):
                    mrel = f"masks/{bag.bag_id}_c{c}.pgm"
                    write_mask(root / mrel, m)
                    masks.append(mrel)
                stored = BagOfPatches(bag.bag_id, bag.embeddings, bag.coords, bag.labels, None)
            else:
                stored = bag
            write_bag(root / rel, stored)
            rows.append({"bag_id": bag.bag_id, "path": rel, "labels": [int(v) for v in bag.labels],
                         "masks": masks})
        entries[split] = rows
    manifest = {
        "format": "heatmil-dataset",
        "version": 1,
        "num_labels": first.num_labels,
        "embed_dim": first.embed_dim,
        "patch_shape": list(first.patch_shape),
        "synth_config": synth_config,
        "splits": entries,
    }
    atomic_write(root / MANIFEST_NAME, manifest_bytes(manifest))
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    if manifest.get("format") != "heatmil-dataset" or "splits" not in manifest:
        raise FormatError("not a dataset manifest")
    return manifest


def load_split(root, split: str, manifest: dict | None = None) -> list[BagOfPatches]:
    root = Path(root)
    manifest = manifest or read_manifest(root)
    if split not in manifest["splits"]:
        raise FormatError(f"manifest has no split {split!r}")
    bags = []
    for row in manifest["splits"][split]:
        bag = read_bag(root / row["path"])
        if list(bag.labels) != row["labels"]:
            raise FormatError(f"labels of {row['path']} disagree with the manifest")
        if bag.mask is None and row.get("masks"):
            mask = np.stack([read_mask(root / m) for m in row["masks"]])
            bag = BagOfPatches(bag.bag_id, bag.embeddings, bag.coords, bag.labels, mask)
        bags.append(bag)
    return bags
