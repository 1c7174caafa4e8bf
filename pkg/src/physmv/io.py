"""On-disk formats: PMV1 binary tensors, binary PGM frames, key=value text."""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMV1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"f32": 0, "f64": 1}


class FormatError(ValueError):
    pass


def encode_pmv(array, precision: str = "f32") -> bytes:
    arr = np.asarray(array)
    if precision not in _CODES:
        raise ValueError(f"unknown precision {precision!r}")
    code = _CODES[precision]
    if arr.ndim > 255:
        raise FormatError("rank too large")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<B", code)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return head + payload


def decode_pmv(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("bad PMV1 magic")
    rank = buf[4]
    off = 5 + 4 * rank
    if len(buf) < off + 1:
        raise FormatError("truncated PMV1 header")
    shape = struct.unpack(f"<{rank}I", buf[5:off])
    code = buf[off]
    if code not in _DTYPES:
        raise FormatError(f"unknown PMV1 dtype code {code}")
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    payload = buf[off + 1 :]
    if len(payload) != count * dt.itemsize:
        raise FormatError("PMV1 payload length does not match extents")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(np.float64)


def save_pmv(path, array, precision: str = "f32") -> None:
    Path(path).write_bytes(encode_pmv(array, precision))


def load_pmv(path) -> np.ndarray:
    return decode_pmv(Path(path).read_bytes())


def save_pgm(path, image) -> None:
    """Write a [0, 1] grayscale image as 8-bit binary PGM (P5)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError("PGM images are 2-d")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def load_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    raw = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    if raw.size != w * h or maxval != 255:
        raise FormatError(f"{path}: truncated or unsupported PGM")
    return raw.reshape(h, w).astype(np.float64) / 255.0


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(format_value(x) for x in v)
    return str(v)


def write_kv(path, mapping: dict) -> None:
    lines = [f"{k}={format_value(v)}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key=value")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def default_root() -> Path:
    return Path(os.environ.get("PHYSMV_HOME", "."))
