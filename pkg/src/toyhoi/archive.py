"""Tensor archive: a zip of raw little-endian float32 blobs plus a JSON manifest.

Entries are written uncompressed with a fixed timestamp and sorted names, so the
same tensors and metadata always give the same bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _as_f32(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.ascontiguousarray(np.asarray(x, dtype="<f4"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def tensor_checksum(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = _as_f32(tensors[name])
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    index = {}
    blobs = {}
    for name in sorted(tensors):
        arr = _as_f32(tensors[name])
        index[name] = {"shape": list(arr.shape), "dtype": "<f4", "file": f"tensors/{name}.bin"}
        blobs[name] = arr.tobytes()
    manifest = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": index}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_entry(MANIFEST), canonical_json(manifest).encode())
        for name in sorted(blobs):
            zf.writestr(_entry(index[name]["file"]), blobs[name])
    return buf.getvalue()


def save(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors, meta))
    return path


def loads(data: bytes):
    """Returns ``(tensors, meta)`` with tensors as float32 torch tensors."""
    with zipfile.ZipFile(io.BytesIO(data)) as zf:
        manifest = json.loads(zf.read(MANIFEST))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported archive format {manifest.get('format_version')}")
        tensors = {}
        for name, entry in manifest["tensors"].items():
            arr = np.frombuffer(zf.read(entry["file"]), dtype="<f4").reshape(entry["shape"])
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, manifest["meta"]


def load(path):
    return loads(Path(path).read_bytes())
