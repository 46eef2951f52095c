"""Versioned single-file tensor checkpoints.

Layout::

    magic  b"MEDCKPT\\n"            8 bytes
    header length                  8 bytes, little-endian uint64
    header                         UTF-8 JSON
    payload                        tensors back to back

The header holds the format version, free-form metadata (manifest, metrics)
and one entry per tensor: name, dtype, shape, offset into the payload,
byte count and SHA-256.  Tensors keep their in-memory dtype (little-endian)
so a save/load round trip is bit-exact in both numeric modes.  Writes go
to a temporary file in the same directory which is then renamed.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from medistill.errors import IntegrityError

MAGIC = b"MEDCKPT\n"
FORMAT_VERSION = 1
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "|b1"}


def _le_dtype(arr: np.ndarray) -> np.dtype:
    return arr.dtype.newbyteorder("<")


def atomic_write_bytes(path: str, chunks) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, [text.encode("utf-8")])


def save_tensors(path: str, tensors: dict[str, np.ndarray], meta: Optional[dict[str, Any]] = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.asarray(value, order="C")  # ascontiguousarray would promote 0-d to 1-d
        dt = _le_dtype(arr)
        if dt.str not in _ALLOWED_DTYPES:
            raise TypeError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, [MAGIC, struct.pack("<Q", len(header)), header, *blobs])


def load_tensors(path: str, verify: bool = True) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file (bad magic or truncated header)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise IntegrityError(f"{path}: truncated header ({len(blob) - 16} of {hlen} bytes)")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header ({exc})") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{path}: checkpoint format version {version} is not supported "
                             f"(expected {FORMAT_VERSION}); no migration is attempted")
    payload = memoryview(blob)[16 + hlen:]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, index expects {expected} (truncated or padded)")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if verify and hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise IntegrityError(f"{path}: checksum mismatch for tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, header["meta"]


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a run."""

    model: dict[str, np.ndarray]
    manifest: dict[str, Any]
    projections: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    metrics: dict[str, Any] = field(default_factory=dict)
    kind: str = "med"

    def build_model(self):
        """Reconstruct the model from the embedded manifest's architecture."""
        from medistill.config import ModelConfig
        from medistill.model import MEDModel
        from medistill.autodiff import parameter

        config = ModelConfig.model_validate(self.manifest["model"])
        return MEDModel(config, {k: parameter(v.copy()) for k, v in self.model.items()})


_SECTIONS = ("model", "projections", "optimizer", "momentum")


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    tensors = {}
    for section in _SECTIONS:
        for name, value in getattr(checkpoint, section).items():
            tensors[f"{section}/{name}"] = value
    meta = {"manifest": checkpoint.manifest, "metrics": checkpoint.metrics, "kind": checkpoint.kind}
    save_tensors(path, tensors, meta)


def load_checkpoint(path: str) -> Checkpoint:
    tensors, meta = load_tensors(path)
    sections = {s: {} for s in _SECTIONS}
    for key, value in tensors.items():
        section, _, name = key.partition("/")
        if section not in sections:
            raise IntegrityError(f"{path}: unknown checkpoint section {section!r}")
        sections[section][name] = value
    return Checkpoint(manifest=meta.get("manifest", {}), metrics=meta.get("metrics", {}),
                      kind=meta.get("kind", "med"), **sections)
