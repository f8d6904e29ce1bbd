"""Parameter checkpoints.

A checkpoint is a directory holding ``params.json`` (format version,
model config, and an ordered tensor table with shapes and byte offsets)
plus ``params.bin`` (every tensor concatenated as row-major little-endian
32-bit floats).  Save followed by load is bit-exact for 32-bit
parameters, which the determinism guarantees depend on.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataFormatError
from .model import (
    ModelConfig,
    ModelParams,
    _param_shapes,
    model_config_from_dict,
    model_config_to_dict,
)
from .autograd import Tensor
from .errors import ConfigError

FORMAT_VERSION = 1
_DTYPE_TAG = "f32le"
_DTYPE = np.dtype("<f4")


def _write_atomic(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def save_checkpoint(path: str, params: ModelParams, config: ModelConfig) -> None:
    """Write ``params.json`` and ``params.bin`` under ``path``.

    Values are stored as 32-bit floats (the training precision); callers
    holding 64-bit parameters lose precision here by design.
    """
    os.makedirs(path, exist_ok=True)
    table = []
    chunks = []
    offset = 0
    for name in params:
        arr = np.ascontiguousarray(params[name].data.astype(_DTYPE, copy=False))
        raw = arr.tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": _DTYPE_TAG,
        "model_config": model_config_to_dict(config),
        "tensors": table,
    }
    _write_atomic(os.path.join(path, "params.bin"), b"".join(chunks))
    _write_atomic(
        os.path.join(path, "params.json"),
        (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode(),
    )


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise DataFormatError(message)


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig]:
    """Read a checkpoint directory back into 32-bit trainable parameters.

    Validates the manifest against the config's parameter schema and the
    binary file's size; any mismatch raises :class:`DataFormatError`
    naming what is wrong.
    """
    json_path = os.path.join(path, "params.json")
    bin_path = os.path.join(path, "params.bin")
    _require(os.path.isfile(json_path), f"missing checkpoint manifest {json_path}")
    _require(os.path.isfile(bin_path), f"missing checkpoint data {bin_path}")
    try:
        with open(json_path, "rb") as f:
            manifest = json.load(f)
    except ValueError as e:
        raise DataFormatError(f"unparseable {json_path}: {e}") from None

    _require(manifest.get("format_version") == FORMAT_VERSION,
             f"params.json: unsupported format_version "
             f"{manifest.get('format_version')!r} (expected {FORMAT_VERSION})")
    _require(manifest.get("dtype") == _DTYPE_TAG,
             f"params.json: unsupported dtype {manifest.get('dtype')!r} "
             f"(expected {_DTYPE_TAG!r})")
    _require(isinstance(manifest.get("model_config"), dict),
             "params.json: missing model_config")
    try:
        config = model_config_from_dict(manifest["model_config"])
    except ConfigError as e:
        raise DataFormatError(f"params.json: bad model_config: {e}") from None

    table = manifest.get("tensors")
    _require(isinstance(table, list), "params.json: missing tensors table")
    expected = {name: shape for name, shape, _ in _param_shapes(config)}
    _require(len(table) == len(expected),
             f"params.json: {len(table)} tensors listed, schema has {len(expected)}")

    raw = open(bin_path, "rb").read()
    tensors: dict[str, Tensor] = {}
    offset = 0
    for entry in table:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            start = int(entry["offset"])
            nbytes = int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"params.json: malformed tensor entry {entry!r}: "
                                  f"{e}") from None
        _require(name in expected, f"params.json: unknown tensor {name!r}")
        _require(name not in tensors, f"params.json: duplicate tensor {name!r}")
        _require(shape == expected[name],
                 f"params.json: tensor {name!r} shape {list(shape)} != "
                 f"schema {list(expected[name])}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        _require(nbytes == count * _DTYPE.itemsize,
                 f"params.json: tensor {name!r} nbytes {nbytes} != "
                 f"{count * _DTYPE.itemsize}")
        _require(start == offset,
                 f"params.json: tensor {name!r} offset {start}, expected {offset}")
        _require(start + nbytes <= len(raw),
                 f"params.bin: truncated at tensor {name!r} "
                 f"(need {start + nbytes} bytes, have {len(raw)})")
        values = np.frombuffer(raw, dtype=_DTYPE, count=count, offset=start)
        tensors[name] = Tensor(values.reshape(shape).copy(), requires_grad=True)
        offset = start + nbytes
    _require(offset == len(raw),
             f"params.bin: size {len(raw)} != manifest total {offset}")
    return ModelParams(tensors), config
