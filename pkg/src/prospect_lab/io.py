"""PSAR array container, binary PGM images and small CSV helpers."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSAR"
VERSION = 1
DTYPE_F32 = 0


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# PSAR: magic, u8 version, u32 count, then per record
#   u16 name length, utf-8 name, u8 dtype, u8 ndim, u32 dims..., f32 payload
# all little-endian.
# --------------------------------------------------------------------------

def encode_psar(arrays: dict) -> bytes:
    out = [MAGIC, struct.pack("<BI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"array name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f4")
        if a.ndim > 255:
            raise FormatError("too many dimensions")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", DTYPE_F32, a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def decode_psar(data: bytes) -> dict:
    if data[:4] != MAGIC:
        raise FormatError("not a PSAR file (bad magic)")
    try:
        version, count = struct.unpack_from("<BI", data, 4)
        if version != VERSION:
            raise FormatError(f"unsupported PSAR version {version}")
        pos = 9
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            if dtype != DTYPE_F32:
                raise FormatError(f"unsupported dtype code {dtype} for {name!r}")
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(data):
                raise FormatError(f"truncated payload for {name!r}")
            if name in arrays:
                raise FormatError(f"duplicate array name {name!r}")
            arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos) \
                .reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise FormatError(f"truncated PSAR: {exc}") from None
    if pos != len(data):
        raise FormatError("trailing bytes after last record")
    return arrays


def write_psar(path, arrays: dict) -> None:
    Path(path).write_bytes(encode_psar(arrays))


def read_psar(path) -> dict:
    return decode_psar(Path(path).read_bytes())


# strings ride in PSAR as f32 arrays of code points
def str_to_array(s: str) -> np.ndarray:
    return np.array([ord(ch) for ch in s], dtype=np.float32)


def array_to_str(a) -> str:
    return "".join(chr(int(v)) for v in np.asarray(a).reshape(-1))


# --------------------------------------------------------------------------
# PGM (P5, maxval 255)
# --------------------------------------------------------------------------

def to_bytes(img) -> np.ndarray:
    v = np.clip((np.asarray(img, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)  # v >= 0, so half-up == half-away-from-zero


def from_bytes(px) -> np.ndarray:
    return (np.asarray(px, dtype=np.float32) / np.float32(255.0)) * np.float32(2.0) - np.float32(1.0)


def encode_pgm(img) -> bytes:
    px = to_bytes(img)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def _pgm_tokens(data: bytes):
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise FormatError("not a binary PGM (P5)")
    (w, h, maxval), pos = _pgm_tokens(data)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    px = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return from_bytes(px.reshape(h, w))


def write_pgm(path, img) -> None:
    Path(path).write_bytes(encode_pgm(img))


def read_pgm(path) -> np.ndarray:
    try:
        return decode_pgm(Path(path).read_bytes())
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
