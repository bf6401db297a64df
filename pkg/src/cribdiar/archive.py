"""Named parameter archives used for checkpoints and MIL -> diarization transfer.

File layout::

    b"CRIBARC1"                      8-byte magic
    uint64 little-endian             manifest length in bytes
    manifest                         UTF-8 JSON: {"meta": {...}, "tensors": [...]}
    buffer                           concatenated little-endian float32 data

Each manifest tensor entry holds name, shape, dtype ("<f4") and the byte
offset/length of its data inside the buffer.  Writing is deterministic, so a
save -> load -> save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Tensor

MAGIC = b"CRIBARC1"
COMPONENTS = ("feat", "embed", "cls")


class ArchiveError(ValueError):
    """Base class for archive problems."""


class CorruptArchiveError(ArchiveError):
    pass


class MissingParameterError(ArchiveError):
    pass


class ShapeMismatchError(ArchiveError):
    pass


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def save_archive(params: Mapping[str, Tensor | np.ndarray], path: str | Path, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, value in params.items():
        arr = np.ascontiguousarray(_as_array(value), dtype="<f4")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ArchiveError("duplicate parameter names")
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (name -> float32 array, meta)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CorruptArchiveError(f"{path}: bad magic")
    if len(raw) < 16:
        raise CorruptArchiveError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16 : 16 + n].decode())
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptArchiveError(f"{path}: unreadable manifest ({exc})") from None
    buf = raw[16 + n :]
    out: dict[str, np.ndarray] = {}
    for e in entries:
        try:
            name, shape, off, nbytes = e["name"], tuple(e["shape"]), e["offset"], e["nbytes"]
        except (KeyError, TypeError):
            raise CorruptArchiveError(f"{path}: malformed manifest entry {e!r}") from None
        if e.get("dtype") != "<f4":
            raise CorruptArchiveError(f"{path}: unsupported dtype {e.get('dtype')!r} for {name}")
        if name in out:
            raise CorruptArchiveError(f"{path}: duplicate name {name}")
        if off < 0 or off + nbytes > len(buf) or nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptArchiveError(f"{path}: entry {name} lies outside the data buffer")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
    return out, manifest.get("meta", {})


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    return read_archive(path)[0]


def load_into(
    params: Mapping[str, Tensor],
    archive: Mapping[str, np.ndarray],
    components: Iterable[str],
) -> list[str]:
    """Copy archived values into ``params`` for the requested components.

    Components the model does not have (``feat`` for a log-Mel model) are
    skipped.  Every model parameter of a requested component must be present
    in the archive with the same shape.  Returns the loaded names.
    """
    wanted = set(components)
    unknown = wanted - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}; expected a subset of {COMPONENTS}")
    targets = {k: v for k, v in params.items() if k.split(".", 1)[0] in wanted}
    missing = sorted(k for k in targets if k not in archive)
    if missing:
        raise MissingParameterError(f"archive lacks parameters: {', '.join(missing)}")
    mismatched = [
        f"{k} (model {targets[k].shape}, archive {archive[k].shape})"
        for k in sorted(targets)
        if tuple(targets[k].shape) != tuple(archive[k].shape)
    ]
    if mismatched:
        raise ShapeMismatchError(f"shape mismatch: {', '.join(mismatched)}")
    for k, t in targets.items():
        t.data[...] = archive[k]
    return sorted(targets)
