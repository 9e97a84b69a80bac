"""Binary and text file formats.

``ZCT1`` tensor file::

    b"ZCT1" | u32 rank | u32 dims[rank] | float32 little-endian payload (C order)

``ZCKP`` checkpoint::

    b"ZCKP" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 count |
    count x (u16 name_len | name UTF-8 | u32 rank | u32 dims[rank] | u64 offset) |
    float32 little-endian payloads, offsets relative to the payload start

Config files are flat UTF-8 ``key = value`` lines with ``#`` comments.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

ZCT_MAGIC = b"ZCT1"
ZCKP_MAGIC = b"ZCKP"
ZCKP_VERSION = 1


class FormatError(ValueError):
    pass


def _as_f32(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.ascontiguousarray(np.asarray(t), dtype="<f4")


def write_tensor(path: str | Path, tensor) -> None:
    arr = _as_f32(tensor)
    with open(path, "wb") as f:
        f.write(ZCT_MAGIC)
        f.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        f.write(arr.tobytes())


def read_tensor(path: str | Path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if data[:4] != ZCT_MAGIC:
        raise FormatError(f"{path}: not a ZCT1 tensor file")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    start = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - start != 4 * count:
        raise FormatError(f"{path}: payload has {len(data) - start} bytes, expected {4 * count}")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(dims)
    return torch.from_numpy(arr.astype(np.float32))


def write_checkpoint(path: str | Path, state: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    arrays = {name: _as_f32(t) for name, t in state.items()}
    header = [ZCKP_MAGIC, struct.pack("<II", ZCKP_VERSION, len(meta_bytes)), meta_bytes]
    header.append(struct.pack("<I", len(arrays)))
    offset = 0
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        header.append(struct.pack(f"<H{len(nb)}sI{arr.ndim}IQ", len(nb), nb, arr.ndim, *arr.shape, offset))
        offset += arr.nbytes
    with open(path, "wb") as f:
        for part in header:
            f.write(part)
        for arr in arrays.values():
            f.write(arr.tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:4] != ZCKP_MAGIC:
        raise FormatError(f"{path}: not a ZCKP checkpoint")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != ZCKP_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        (offset,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        entries.append((name, dims, offset))
    state = {}
    for name, dims, offset in entries:
        count_ = int(np.prod(dims, dtype=np.int64))
        start = pos + offset
        if start + 4 * count_ > len(data):
            raise FormatError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=count_, offset=start).reshape(dims)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    return state, meta


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_config(path: str | Path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


def format_config(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)
