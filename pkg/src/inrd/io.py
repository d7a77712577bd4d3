"""On-disk formats: tensor sections, checkpoints, images and CSV tables.

TensorFile section (all integers little-endian)::

    b"INRD" | u32 version | u32 dtype (1 = f32, 2 = f64) | u32 ndim |
    u64 dims[ndim] | row-major payload | u32 CRC32 of everything before it

Checkpoint file::

    b"INRDCKPT\\n" | u64 header length | UTF-8 JSON header | TensorFile sections

The header lists section names in order under ``"tensors"``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cohort import CohortCheckpoint
from .errors import ContractError, InrdError
from .inr import InrConfig
from .sae import SaeConfig, SaeModel

MAGIC = b"INRD"
VERSION = 1
CKPT_MAGIC = b"INRDCKPT\n"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class FormatError(InrdError, ValueError):
    """A file is truncated, corrupt or of the wrong kind."""


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise ContractError(f"TensorFile stores float32/float64 only, got {array.dtype}")
    head = MAGIC + struct.pack("<III", VERSION, code, array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    body = head + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one section at ``offset``; returns the array and the offset after it."""
    start = offset
    try:
        if buf[offset: offset + 4] != MAGIC:
            raise FormatError(f"bad tensor magic at byte {offset}")
        version, code, ndim = struct.unpack_from("<III", buf, offset + 4)
        offset += 16
        if version != VERSION:
            raise FormatError(f"unsupported tensor version {version}")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}")
        dims = struct.unpack_from(f"<{ndim}Q", buf, offset)
        offset += 8 * ndim
        dt = _DTYPES[code]
        size = math.prod(dims) * dt.itemsize
        if offset + size + 4 > len(buf):
            raise FormatError("tensor payload truncated")
        payload = buf[offset: offset + size]
        offset += size
        (crc,) = struct.unpack_from("<I", buf, offset)
    except struct.error as exc:
        raise FormatError(f"truncated tensor section: {exc}") from exc
    if zlib.crc32(buf[start:offset]) != crc:
        raise FormatError("tensor CRC mismatch")
    array = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return array, offset + 4


def _write_sections(path: Path, header: dict, arrays: Sequence[tuple[str, np.ndarray]]) -> Path:
    header = dict(header, tensors=[name for name, _ in arrays])
    text = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<Q", len(text)), text]
    parts += [encode_tensor(a) for _, a in arrays]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def _read_sections(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CKPT_MAGIC):
        raise FormatError(f"{path} is not an INRD checkpoint")
    offset = len(CKPT_MAGIC)
    (n,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    try:
        header = json.loads(buf[offset: offset + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header in {path}") from exc
    offset += n
    arrays = {}
    for name in header["tensors"]:
        arrays[name], offset = decode_tensor(buf, offset)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes in {path}")
    return header, arrays


def save_checkpoint(ckpt: CohortCheckpoint, path: Path) -> Path:
    header = {"kind": "cohort", "config": ckpt.config.to_dict(), "meta": ckpt.meta,
              "depth": ckpt.depth, "heads": len(ckpt.heads)}
    return _write_sections(path, header, ckpt.named_arrays())


def load_checkpoint(path: Path) -> CohortCheckpoint:
    header, arrays = _read_sections(path)
    if header.get("kind") != "cohort":
        raise FormatError(f"{path} holds a {header.get('kind')!r} checkpoint, expected 'cohort'")
    config = InrConfig.from_dict(header["config"])
    depth, n_heads = header["depth"], header["heads"]
    B = arrays.get("B")
    if B is not None:
        B.setflags(write=False)
    return CohortCheckpoint(
        config,
        [arrays[f"W{i}"] for i in range(depth)],
        [arrays[f"b{i}"] for i in range(depth)],
        [(arrays[f"head{j}.W"], arrays[f"head{j}.b"]) for j in range(n_heads)],
        B,
        header["meta"],
    )


def save_sae(sae: SaeModel, path: Path) -> Path:
    header = {"kind": "sae", "config": sae.config.to_dict(), "meta": sae.meta}
    return _write_sections(path, header, sae.named_arrays())


def load_sae(path: Path) -> SaeModel:
    header, arrays = _read_sections(path)
    if header.get("kind") != "sae":
        raise FormatError(f"{path} holds a {header.get('kind')!r} checkpoint, expected 'sae'")
    return SaeModel(arrays["W_enc"], arrays["b_enc"], arrays["W_dec"], arrays["b_pre"],
                    SaeConfig.from_dict(header["config"]), header["meta"])


# --------------------------------------------------------------------------- images


def load_image(path: Path) -> np.ndarray:
    """PNG or PPM/PGM as an ``H x W x c`` float64 array in ``[0, 1]``."""
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise FormatError(f"{path}: unsupported image format {im.format}")
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB")
                arr = np.asarray(im, dtype=np.float64) / 255.0
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image") from exc
    except OSError as exc:
        raise FormatError(f"{path}: corrupt image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(image: np.ndarray, path: Path) -> Path:
    from PIL import Image

    u8 = to_uint8(image)
    if u8.ndim == 3 and u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8).save(path, format="PNG")
    return path


# --------------------------------------------------------------------------- tables

SCHEMAS = {
    "sweep": ("tau", "image", "seed", "psnr", "ssim", "best_psnr"),
    "rank": ("layer", "sr_w", "sr_h"),
    "sae_sweep": ("n", "k", "layer", "psnr", "r2", "alive_pct", "spatial_l0"),
    "atoms": ("layer", "atom", "mean_mag", "fire_rate", "active_frac", "ipr", "dead"),
}


def _cell(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, rows: Iterable[dict], columns: Sequence[str] | str) -> Path:
    """Write ``rows`` with a fixed column order; ``columns`` may name a schema."""
    if isinstance(columns, str):
        columns = SCHEMAS[columns]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])
    return path


def read_csv(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
