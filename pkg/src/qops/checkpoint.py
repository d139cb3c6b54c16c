"""Binary checkpoint container.

Layout (all integers little-endian u32)::

    b"QOPS" | version | section tag (4 ASCII bytes)
    | config length | config text: "key=value" lines, UTF-8
    | tensor count
    | per tensor: name length | name | ndim | dims... | float64 LE data

Section tags separate model families sharing the container: ``S2SQ``
(operator predictor), ``CNET`` (conditioned copy decoder), ``TREE``
(margin tree scorer).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"QOPS"
VERSION = 1


class FormatError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def dump_config(config: dict[str, str]) -> str:
    lines = []
    for k, v in config.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValueError(f"config entry {k!r} cannot be stored as key=value")
        lines.append(f"{k}={v}")
    return "\n".join(lines)


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"config line {n} is not key=value: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save(path: str | Path, section: str, config: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    tag = section.encode("ascii")
    if len(tag) != 4:
        raise ValueError(f"section tag must be 4 ASCII bytes, got {section!r}")
    cfg = dump_config(config).encode("utf-8")
    parts = [MAGIC, _u32(VERSION), tag, _u32(len(cfg)), cfg, _u32(len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load(path: str | Path, section: str | None = None) -> tuple[str, dict[str, str], dict[str, np.ndarray]]:
    """Return (section tag, config, tensors); checks magic, version and tag."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        tag = r.take(4).decode("ascii")
        config = parse_config(r.take(r.u32()).decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    if section is not None and tag != section:
        raise FormatError(f"{path}: expected section {section}, found {tag}")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    return tag, config, tensors
