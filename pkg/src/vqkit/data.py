"""Dataset ingestion: IDX containers for corpora, binary PPM/PGM for single
images. Pixels live in [-0.5, 0.5] everywhere inside the toolkit; bytes map
through x/255 - 0.5 and back with round-half-up."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import DTYPE

IDX_IMAGE_MAGIC = 0x00000803
MAX_ELEMENTS = 1 << 34  # refuse absurd headers before allocating


class DataError(Exception):
    pass


@dataclass
class Dataset:
    """Uniform image stack (B, C, H, W), float32 in [-0.5, 0.5]."""

    images: np.ndarray
    source: str = ""
    split: str = "train"

    def __post_init__(self):
        arr = np.asarray(self.images, dtype=DTYPE)
        if arr.ndim != 4:
            raise DataError(f"dataset must be 4-D, got shape {arr.shape}")
        if arr.shape[1] not in (1, 3):
            raise DataError(f"dataset channels must be 1 or 3, got {arr.shape[1]}")
        if arr.size and (arr.min() < -0.5 or arr.max() > 0.5):
            raise DataError("dataset values must lie in [-0.5, 0.5]")
        self.images = arr

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return self.images.shape[1:]


def bytes_to_unit(b):
    return np.asarray(b, dtype=DTYPE) / DTYPE(255.0) - DTYPE(0.5)


def unit_to_bytes(x):
    v = np.clip(np.asarray(x, dtype=np.float64), -0.5, 0.5)
    return np.floor((v + 0.5) * 255.0 + 0.5).astype(np.uint8)


def load_idx(path, split="train"):
    """Read an unsigned-byte 3-D IDX image file into a Dataset."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected "
            f"0x{IDX_IMAGE_MAGIC:08x} (u8 3-D images)"
        )
    if len(raw) < 16:
        raise DataError(f"{path}: truncated IDX dimension header")
    n, h, w = struct.unpack(">III", raw[4:16])
    count = n * h * w
    if count > MAX_ELEMENTS:
        raise DataError(f"{path}: dimension overflow ({n} x {h} x {w})")
    payload = raw[16:]
    if len(payload) != count:
        raise DataError(
            f"{path}: payload holds {len(payload)} bytes, header promises {count}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, h, w)
    return Dataset(bytes_to_unit(pixels), source=str(path), split=split)


def save_idx(images, path):
    """Write a (B, 1, H, W) or (B, H, W) u8/float stack as an IDX file."""
    arr = np.asarray(images)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise DataError("IDX output supports single-channel images only")
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise DataError(f"save_idx expects 3-D or 4-D input, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = unit_to_bytes(arr)
    n, h, w = arr.shape
    path = Path(path)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(arr).tobytes())


def _read_pnm_token(raw, pos):
    while pos < len(raw):
        ch = raw[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise DataError("unterminated comment in PNM header")
            pos = nl + 1
        else:
            break
    start = pos
    while pos < len(raw) and not raw[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataError("truncated PNM header")
    return raw[start:pos], pos


def load_image(path):
    """Read a binary PGM (P5) or PPM (P6) into a (C, H, W) float array."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if raw[:2] == b"P5":
        channels = 1
    elif raw[:2] == b"P6":
        channels = 3
    else:
        raise DataError(f"{path}: not a binary PGM/PPM file")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_pnm_token(raw, pos)
        try:
            fields.append(int(tok))
        except ValueError as e:
            raise DataError(f"{path}: bad PNM header field {tok!r}") from e
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    need = w * h * channels
    payload = raw[pos:pos + need]
    if len(payload) != need:
        raise DataError(f"{path}: pixel payload truncated")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return bytes_to_unit(pixels.transpose(2, 0, 1))


def save_image(image, path):
    """Write a (C, H, W) or (H, W) float array as binary PGM/PPM."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DataError(f"save_image expects (1|3, H, W), got {arr.shape}")
    c, h, w = arr.shape
    pixels = unit_to_bytes(arr).transpose(1, 2, 0)
    header = (b"P5" if c == 1 else b"P6") + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())


def load_ppm_dir(path, split="train"):
    """Load every .pgm/.ppm in a directory (sorted) as one Dataset."""
    path = Path(path)
    files = sorted(p for p in path.iterdir()
                   if p.suffix.lower() in (".pgm", ".ppm"))
    if not files:
        raise DataError(f"no .pgm/.ppm files in {path}")
    images = [load_image(p) for p in files]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"images in {path} have mixed shapes: {sorted(shapes)}")
    return Dataset(np.stack(images), source=str(path), split=split)


def load_dataset(path, split="train"):
    """Dispatch on path: IDX file or a directory of PGM/PPM images."""
    path = Path(path)
    if path.is_dir():
        return load_ppm_dir(path, split=split)
    return load_idx(path, split=split)
