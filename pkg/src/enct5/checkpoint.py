"""Checkpoint file format and the weight-loading transformations between variants.

File layout (all integers little-endian)::

    bytes 0..7    magic  b"ENCT5CKP"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..19  uint64 header length H
    next H bytes  UTF-8 JSON header:
                    {"config": {...ModelConfig...}, "seed": int | null,
                     "blob_length": int, "blob_sha256": hex,
                     "manifest": [{"name", "dtype": "<f8"|"<f4", "shape", "offset", "nbytes"}, ...]}
    rest          blob: raw little-endian tensor bytes in manifest order

Manifest entries are sorted by name and laid out back to back.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import ModelConfig, ParameterStore, init_parameter, layer_prefix, parameter_shapes

MAGIC = b"ENCT5CKP"
FORMAT_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}

ENCT5_FRESH = ("head/bos_embedding", "head/projection_kernel", "head/projection_bias")


class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, name: str, expected, found) -> None:
        super().__init__(f"shape mismatch for {name}: expected {tuple(expected)}, found {tuple(found)}")
        self.name = name


class TruncatedBlobError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


class SurgeryError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParameterStore
    seed: int | None = None


def save(path: str | os.PathLike, params, config: ModelConfig, seed: int | None = None) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.asarray(params[name].data if isinstance(params[name], T.Tensor) else params[name])
        tag = "<f4" if arr.dtype == np.float32 else "<f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        manifest.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset,
                         "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = {
        "config": config.to_dict(),
        "seed": seed,
        "blob_length": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "manifest": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + blob)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    save(path, ckpt.params, ckpt.config, ckpt.seed)


def load(path: str | os.PathLike) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 20:
        raise TruncatedBlobError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 20 + hlen:
        raise TruncatedBlobError(f"{path}: truncated header")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    manifest = header["manifest"]

    expected = parameter_shapes(config)
    names = [e["name"] for e in manifest]
    if names != sorted(set(names)):
        raise ManifestError("manifest names must be unique and sorted")
    if set(names) != set(expected):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise ManifestError(f"manifest does not match config: missing={missing} extra={extra}")
    offset = 0
    for e in manifest:
        if tuple(e["shape"]) != expected[e["name"]]:
            raise ShapeMismatchError(e["name"], expected[e["name"]], e["shape"])
        if e["dtype"] not in _DTYPES:
            raise ManifestError(f"unknown dtype tag {e['dtype']!r} for {e['name']}")
        size = int(np.prod(e["shape"], dtype=np.int64)) * _DTYPES[e["dtype"]].itemsize
        if e["offset"] != offset or e["nbytes"] != size:
            raise ManifestError(f"bad offset/size for {e['name']}")
        offset += size
    if offset != header["blob_length"]:
        raise ManifestError("blob_length does not equal the sum of entry sizes")

    blob = raw[20 + hlen:]
    if len(blob) < header["blob_length"]:
        raise TruncatedBlobError(f"{path}: truncated blob ({len(blob)} of {header['blob_length']} bytes)")
    if len(blob) > header["blob_length"]:
        raise ManifestError(f"{path}: trailing bytes after blob")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise ChecksumError(f"{path}: blob checksum mismatch")

    params = ParameterStore()
    for e in manifest:
        arr = np.frombuffer(blob, dtype=_DTYPES[e["dtype"]], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = T.parameter(arr.astype(arr.dtype.newbyteorder("="), copy=True), name=e["name"])
    return Checkpoint(config=config, params=params, seed=header["seed"])


# -- surgery -------------------------------------------------------------------

@dataclass
class SurgeryReport:
    loaded: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)
    fresh: list[str] = field(default_factory=list)
    remapped: dict[str, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"loaded ({len(self.loaded)}):"]
        for n in self.loaded:
            src = self.remapped.get(n)
            lines.append(f"  {n}" + (f" <- {src}" if src else ""))
        lines.append(f"dropped ({len(self.dropped)}):")
        lines += [f"  {n}" for n in self.dropped]
        lines.append(f"fresh ({len(self.fresh)}):")
        lines += [f"  {n}" for n in self.fresh]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def _copy(t: T.Tensor, name: str) -> T.Tensor:
    return T.parameter(t.data.copy(), name=name)


def _check_source(source: Checkpoint) -> None:
    if source.config.variant == "enct5" or source.config.decoder_depth < 1:
        raise SurgeryError("source checkpoint has no decoder layer")


def surgery_1dect5(source: Checkpoint) -> tuple[Checkpoint, SurgeryReport]:
    """Keep everything except decoder layers beyond the first."""
    _check_source(source)
    target_cfg = source.config.replace(variant="1dect5", num_decoder_layers=1)
    report = SurgeryReport()
    params = ParameterStore()
    for name in parameter_shapes(target_cfg):
        params[name] = _copy(source.params[name], name)
        report.loaded.append(name)
    report.dropped = [n for n in source.params if n not in params]
    return Checkpoint(target_cfg, params, source.seed), report


def enct5_source_name(target: str, source_cfg: ModelConfig) -> str | None:
    """Source parameter a target EncT5 name is loaded from (None for fresh ones)."""
    if target in ENCT5_FRESH:
        return None
    if target.startswith("head/"):
        rest = target[len("head/"):]
        if rest == "final_norm":
            return "decoder/final_norm"
        return f"{layer_prefix('decoder', 0)}/{rest}"
    return target


def surgery_enct5(source: Checkpoint, n_classes: int, task_kind: str = "classification",
                  seed: int = 0) -> tuple[Checkpoint, SurgeryReport]:
    """Reuse embeddings, encoder and decoder layer 0's cross-attention + FFN; fresh BOS and projection."""
    _check_source(source)
    if n_classes < 1:
        raise SurgeryError("n_classes must be >= 1")
    target_cfg = source.config.replace(variant="enct5", num_classes=n_classes, task_kind=task_kind)
    target_shapes = parameter_shapes(target_cfg)
    report = SurgeryReport()
    params = ParameterStore()
    used: set[str] = set()
    dtype = source.params["shared/embedding"].dtype
    for name, shape in target_shapes.items():
        src = enct5_source_name(name, source.config)
        if src is not None and src in source.params and source.params[src].shape == shape:
            params[name] = _copy(source.params[src], name)
            report.loaded.append(name)
            used.add(src)
            if src != name:
                report.remapped[name] = src
            continue
        if src is not None:
            report.notes.append(f"{name}: no shape-compatible source {src}, initialised fresh")
        params[name] = init_parameter(name, shape, target_cfg, seed, dtype)
        report.fresh.append(name)
    report.dropped = [n for n in source.params if n not in used]
    report.notes.append("head/final_norm loaded from decoder/final_norm; "
                        "pooling pre-norms loaded from decoder layer 0")
    report.notes.append("optimizer slots are not carried over; they restart at fine-tune start")
    return Checkpoint(target_cfg, params, seed), report


def diff(a, b) -> dict[str, str]:
    """Bitwise per-name comparison: equal | differs | only-in-a | only-in-b."""
    pa = a.params if isinstance(a, Checkpoint) else a
    pb = b.params if isinstance(b, Checkpoint) else b
    out: dict[str, str] = {}
    for name in sorted(set(pa) | set(pb)):
        if name not in pb:
            out[name] = "only-in-a"
        elif name not in pa:
            out[name] = "only-in-b"
        else:
            x = np.asarray(getattr(pa[name], "data", pa[name]))
            y = np.asarray(getattr(pb[name], "data", pb[name]))
            same = x.shape == y.shape and x.dtype == y.dtype and x.tobytes() == y.tobytes()
            out[name] = "equal" if same else "differs"
    return out
