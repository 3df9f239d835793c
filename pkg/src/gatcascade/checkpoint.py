"""Versioned binary checkpoints for cascade (and optional backbone) parameters.

Layout, all integers little-endian::

    b"SPGA"  u32 version  u32 header_len  header (UTF-8 JSON)
    f64 blocks in header["blocks"] order
    u32 CRC32 of everything above

The header holds the configs and a ``blocks`` table of ``name``, ``shape``
and byte ``offset`` (relative to the start of the data section). A copy of
that table is written next to the checkpoint as ``<path>.json``.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .backbone import BackboneConfig, init_backbone
from .errors import FormatError
from .fileio import atomic_write_bytes, atomic_write_text
from .nn import flatten
from .regressor import CascadeConfig, init_cascade

MAGIC = b"SPGA"
VERSION = 1


@dataclass
class Checkpoint:
    cascade_cfg: CascadeConfig
    cascade: list[dict]
    backbone_cfg: BackboneConfig | None = None
    backbone: list[dict] | None = None
    meta: dict = field(default_factory=dict)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = list(flatten(self.cascade, "cascade"))
        if self.backbone is not None:
            out += list(flatten(self.backbone, "backbone"))
        return out


def _header(ck: Checkpoint) -> tuple[dict, list[np.ndarray]]:
    blocks, arrays, offset = [], [], 0
    for name, t in ck.named_tensors():
        a = np.ascontiguousarray(t.data, dtype="<f8")
        blocks.append({"name": name, "shape": list(a.shape), "offset": offset})
        arrays.append(a)
        offset += a.nbytes
    header = {
        "cascade": ck.cascade_cfg.to_dict(),
        "backbone": ck.backbone_cfg.to_dict() if ck.backbone_cfg is not None else None,
        "meta": ck.meta,
        "blocks": blocks,
    }
    return header, arrays


def encode(ck: Checkpoint) -> bytes:
    header, arrays = _header(ck)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(a.tobytes() for a in arrays)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, ck: Checkpoint) -> None:
    data = encode(ck)
    header, _ = _header(ck)
    manifest = {"format": "SPGA", "version": VERSION, "crc32": struct.unpack("<I", data[-4:])[0], "blocks": header["blocks"]}
    atomic_write_bytes(path, data)
    atomic_write_text(str(path) + ".json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{source}: checkpoint version {version}, this build reads {VERSION}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError(f"{source}: checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{source}: unreadable header") from None
    start = 12 + hlen
    payload = data[start:-4]
    ccfg = CascadeConfig.from_dict(header["cascade"])
    cascade = init_cascade(ccfg, 0)
    bcfg = backbone = None
    if header.get("backbone") is not None:
        bcfg = BackboneConfig.from_dict(header["backbone"])
        backbone = init_backbone(bcfg, 0)
    ck = Checkpoint(ccfg, cascade, bcfg, backbone, header.get("meta", {}))
    expected = ck.named_tensors()
    blocks = header["blocks"]
    if [b["name"] for b in blocks] != [n for n, _ in expected]:
        raise FormatError(f"{source}: parameter blocks do not match the stored architecture")
    for b, (name, t) in zip(blocks, expected):
        shape = tuple(b["shape"])
        if shape != t.data.shape:
            raise FormatError(f"{source}: block {name} has shape {shape}, architecture needs {t.data.shape}")
        n = int(np.prod(shape)) * 8
        off = int(b["offset"])
        if off < 0 or off + n > len(payload):
            raise FormatError(f"{source}: block {name} runs past the end of the data")
        t.data = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=off).reshape(shape).astype(np.float64)
    return ck


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), str(path))
