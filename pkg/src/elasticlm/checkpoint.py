"""Single-file storage for models and passage indexes.

Layout of a model checkpoint::

    8 bytes   magic  b"ELMCKPT\\0"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length H, uint64 little-endian
    H bytes   UTF-8 JSON header: config, submap, parameter table, extras
    ...       parameter payloads, float64 little-endian ('<f8'), C order,
              concatenated in parameter-table order

Each parameter-table entry records name, shape, byte offset (relative to
the end of the header) and byte count. A passage index uses the same
framing with magic b"ELMINDX\\0"; its payload is the int64 id column
followed by the float64 vector matrix, both little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import CheckpointError, ConfigError
from .model import ElasticModel, ModelConfig, Submap

MODEL_MAGIC = b"ELMCKPT\0"
INDEX_MAGIC = b"ELMINDX\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _write(path, magic: bytes, header: dict, payloads: list[bytes]) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(magic, FORMAT_VERSION, len(head)))
        f.write(head)
        for blob in payloads:
            f.write(blob)


def _read(path, magic: bytes) -> tuple[dict, memoryview]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    got, version, size = _PREFIX.unpack_from(raw)
    if got != magic:
        raise CheckpointError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size + size
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    return header, memoryview(raw)[start:]


def _array(body: memoryview, offset: int, nbytes: int, dtype: str, shape, path) -> np.ndarray:
    if offset + nbytes > len(body):
        raise CheckpointError(f"{path}: payload truncated")
    return np.frombuffer(body[offset:offset + nbytes], dtype=dtype).reshape(shape).copy()


def save_model(path, model: ElasticModel, extras: dict | None = None) -> None:
    """Write config, submap, every parameter, and JSON-serializable extras."""
    table, blobs, offset = [], [], 0
    for name, p in model.params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": model.config.to_dict(),
        "submap": model.submap.to_dict(),
        "params": table,
        "extras": extras or {},
    }
    _write(path, MODEL_MAGIC, header, blobs)


def read_header(path) -> dict:
    return _read(path, MODEL_MAGIC)[0]


def load_model(path, expected_config: ModelConfig | None = None) -> tuple[ElasticModel, dict]:
    """Rebuild a model; returns (model, extras).

    Raises :class:`ConfigError` when ``expected_config`` differs from the stored
    one or a parameter's shape disagrees with the stored config.
    """
    header, body = _read(path, MODEL_MAGIC)
    config = ModelConfig.from_dict(header["config"])
    if expected_config is not None and expected_config != config:
        diff = {k: (v, header["config"][k]) for k, v in expected_config.to_dict().items()
                if header["config"].get(k) != v}
        raise ConfigError(f"{path}: stored config differs from expected (expected, stored): {diff}")
    params = {}
    for entry in header["params"]:
        data = _array(body, entry["offset"], entry["nbytes"], "<f8", entry["shape"], path)
        params[entry["name"]] = nx.parameter(data.astype(np.float64), name=entry["name"])
    model = ElasticModel(config, params, Submap.from_dict(header["submap"]))
    return model, header.get("extras", {})


def update_extras(path, **extras) -> None:
    """Rewrite a checkpoint with some extras replaced (parameters untouched)."""
    model, old = load_model(path)
    old.update(extras)
    save_model(path, model, old)


def save_index(path, index, extras: dict | None = None) -> None:
    ids = np.ascontiguousarray(index.ids, dtype="<i8").tobytes()
    vecs = np.ascontiguousarray(index.vectors, dtype="<f8").tobytes()
    header = {
        "n": int(len(index.ids)),
        "dim": int(index.vectors.shape[1]) if index.vectors.ndim == 2 else 0,
        "ids_nbytes": len(ids),
        "vectors_nbytes": len(vecs),
        "extras": extras or {},
    }
    _write(path, INDEX_MAGIC, header, [ids, vecs])


def load_index(path):
    from .retrieval import PassageIndex

    header, body = _read(path, INDEX_MAGIC)
    n, dim = header["n"], header["dim"]
    ids = _array(body, 0, header["ids_nbytes"], "<i8", (n,), path)
    vecs = _array(body, header["ids_nbytes"], header["vectors_nbytes"], "<f8", (n, dim), path)
    return PassageIndex(ids.astype(np.int64), vecs.astype(np.float64))
