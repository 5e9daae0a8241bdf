"""Single-file tensor archive used for every persisted artifact.

Layout (all integers little-endian):

    bytes 0..3    magic b"MSVC"
    bytes 4..7    format version, uint32
    bytes 8..15   header length H, uint64
    bytes 16..    header: canonical UTF-8 JSON of
                  {"meta": {...},
                   "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
                   "payload_sha256": hex}
    16+H..        payload: the tensors' raw bytes, C order, sorted by name

Tensor dtypes are restricted to little-endian numpy codes. A JSON sidecar
(<path>.json) mirrors the meta block so artifacts are inspectable without
parsing the binary. Writes are deterministic: identical content produces
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .config import canonical_json
from .errors import IntegrityError, InvalidInputError

MAGIC = b"MSVC"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|u1"}


def _dtype_code(arr: np.ndarray) -> str:
    code = np.dtype(arr.dtype).newbyteorder("<").str
    if code == "<u1":
        code = "|u1"
    if code not in _ALLOWED_DTYPES:
        raise InvalidInputError(f"unsupported tensor dtype {arr.dtype}")
    return code


def save(path, tensors: dict, meta: dict | None = None, sidecar: bool = True) -> None:
    """Write tensors + metadata to a fresh archive at `path`."""
    path = Path(path)
    meta = dict(meta or {})
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = _dtype_code(arr)
        raw = arr.astype(np.dtype(code), copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "meta": meta,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = canonical_json(header).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        fh.write(payload)
    if sidecar:
        sidecar_path = path.with_suffix(path.suffix + ".json")
        sidecar_path.write_text(canonical_json(meta) + "\n", encoding="utf-8")


def load(path) -> tuple[dict, dict]:
    """Read an archive; returns (tensors, meta). Verifies checksum and version."""
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"no such artifact: {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise IntegrityError(f"{path} is not a tensor archive (bad magic)")
    version = int.from_bytes(blob[4:8], "little")
    if version != FORMAT_VERSION:
        raise IntegrityError(
            f"{path} has format version {version}, this build reads {FORMAT_VERSION}")
    header_len = int.from_bytes(blob[8:16], "little")
    if len(blob) < 16 + header_len:
        raise IntegrityError(f"{path} is truncated (header)")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path} has a corrupt header: {exc}") from exc
    payload = blob[16 + header_len:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise IntegrityError(f"{path} failed its payload checksum")
    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise IntegrityError(f"{path} is truncated (tensor {entry['name']})")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header.get("meta", {})


def load_meta(path) -> dict:
    """Read only the metadata block."""
    _, meta = load(path)
    return meta
