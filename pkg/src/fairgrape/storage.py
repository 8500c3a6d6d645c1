"""Checkpoint, report and table files.

A ``.fgpk`` checkpoint is little-endian binary::

    b"FGPK1" | u32 layer count | u8 has-snapshot
    per layer: u8 kind (0 dense, 1 conv2d) | u8 ndim | u64 extents | f64 weights
               | u64 bias length | f64 bias | u8 mask per weight
    if has-snapshot, per layer: f64 initial weights | f64 initial bias

Layer metadata that the binary does not carry (activation, stride, padding, input
shape) lives in a JSON sidecar ``<name>.fgpk.json``.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .errors import DataError
from .models import ArtifactRef, FairnessReport
from .network import KIND_CONV, KIND_DENSE, MaskedLayer, Model
from .tensor import Tensor
from .utils import canonical_json, sha256_file

logger = logging.getLogger(__name__)

MAGIC = b"FGPK1"
_KIND_TAGS = {KIND_DENSE: 0, KIND_CONV: 1}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}

PathLike = Union[str, Path]


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(model: Model, path: PathLike) -> Path:
    """Write ``path`` (little-endian): magic, u32 layer count, u8 snapshot flag; per layer u8 kind,
    u8 ndim, u64 extents, f8 weights, u64 bias length, f8 bias, u8 mask; then, when flagged, the
    initial f8 weights and bias of every layer. ``path.json`` mirrors shapes and metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    has_snapshot = model.initial_snapshot is not None
    chunks = [MAGIC, struct.pack("<IB", len(model.layers), int(has_snapshot))]
    for layer in model.layers:
        shape = layer.weights.shape
        chunks.append(struct.pack("<BB", _KIND_TAGS[layer.kind], len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}Q", *shape))
        chunks.append(np.ascontiguousarray(layer.weights.data, dtype="<f8").tobytes())
        chunks.append(struct.pack("<Q", layer.bias.size))
        chunks.append(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.mask, dtype=np.uint8).tobytes())
    if has_snapshot:
        for weights, bias in model.initial_snapshot:
            chunks.append(np.ascontiguousarray(weights, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(bias, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    sidecar_path(path).write_text(canonical_json(model.describe()))
    return path


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob, self.offset, self.path = blob, 0, path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise DataError(f"{self.path} is truncated")
        out = self.blob[self.offset:self.offset + size]
        self.offset += size
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def load_checkpoint(path: PathLike) -> Model:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    meta_path = sidecar_path(path)
    if not meta_path.is_file():
        raise DataError(f"checkpoint sidecar not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise DataError(f"{path} is not a fgpk checkpoint")
    count, has_snapshot = reader.unpack("<IB")
    if count != len(meta["layers"]):
        raise DataError(f"{path} holds {count} layers but its sidecar describes {len(meta['layers'])}")
    layers = []
    for layer_meta in meta["layers"]:
        tag, ndim = reader.unpack("<BB")
        if tag not in _TAG_KINDS:
            raise DataError(f"{path}: unknown layer kind tag {tag}")
        shape = reader.unpack(f"<{ndim}Q")
        size = int(np.prod(shape))
        weights = reader.floats(size).reshape(shape)
        (bias_len,) = reader.unpack("<Q")
        bias = reader.floats(bias_len)
        mask = np.frombuffer(reader.take(size), dtype=np.uint8).reshape(shape).copy()
        layers.append(MaskedLayer(_TAG_KINDS[tag], Tensor(weights, requires_grad=True),
                                  Tensor(bias, requires_grad=True), mask, layer_meta["layer_id"],
                                  layer_meta["activation"], layer_meta["stride"], layer_meta["padding"]))
    model = Model(layers, meta["output_classes"], meta["input_shape"])
    if has_snapshot:
        model.initial_snapshot = [
            (reader.floats(l.num_weights).reshape(l.weights.shape), reader.floats(l.bias.size)) for l in layers
        ]
    if reader.offset != len(reader.blob):
        raise DataError(f"{path} has trailing bytes")
    return model


# =============== Reports and tables ===============

def write_json(value: Union[BaseModel, Dict[str, Any], list], path: PathLike) -> Path:
    """Deterministic JSON: sorted keys, shortest float repr"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = value.model_dump(mode="json") if isinstance(value, BaseModel) else value
    path.write_text(canonical_json(payload))
    return path


def read_report(path: PathLike) -> FairnessReport:
    try:
        return FairnessReport.model_validate_json(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"report not found: {path}") from exc


def write_table(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def artifact(path: PathLike, root: PathLike) -> ArtifactRef:
    """Reference to a file relative to the run directory, with its sha256"""
    path = Path(path)
    return ArtifactRef(path=str(path.relative_to(root)), sha256=sha256_file(path))


def verify_artifact(ref: ArtifactRef, root: PathLike) -> bool:
    target = Path(root) / ref.path
    return target.is_file() and sha256_file(target) == ref.sha256
