"""Single-file model container.

Layout, all integers little-endian::

    b"AXSUBMDL"  u32 version  u32 header_len  u32 header_crc32  header(JSON)  blobs

The JSON header lists the layers with their hyperparameters, bitwidths,
quantization parameters and, for every array, its shape, byte offset into
the blob section, byte length and CRC32.  Arrays are stored as float32.  An
optional calibration state and free-form metadata ride along in the header.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .calib import CalibState
from .netsim import (Add, AvgPool2d, BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2d, ModelGraph, ReLU,
                     Save)
from .quant import QuantParams

MAGIC = b"AXSUBMDL"
VERSION = 1
_PREFIX = struct.Struct("<8sIII")

_ARRAYS = {
    "conv2d": ("weight", "bias"),
    "linear": ("weight", "bias"),
    "batchnorm2d": ("gamma", "beta", "mean", "var"),
}


class ModelFileError(ValueError):
    pass


class VersionMismatch(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class BlobSizeError(ModelFileError):
    pass


def _layer_header(layer) -> dict:
    kind = layer.kind
    d = {"type": kind}
    if kind == "conv2d":
        d.update(stride=layer.stride, padding=layer.padding)
    if kind in ("conv2d", "linear"):
        d.update(bits_x=layer.bits_x, bits_w=layer.bits_w,
                 qx=None if layer.qx is None else layer.qx.to_dict(),
                 qw=None if layer.qw is None else layer.qw.to_dict())
    elif kind == "batchnorm2d":
        d["eps"] = layer.eps
    elif kind in ("maxpool2d", "avgpool2d"):
        d.update(kernel=layer.kernel, stride=layer.stride)
    elif kind in ("save", "add"):
        d["tag"] = layer.tag
    return d


def model_to_bytes(model: ModelGraph, calib: CalibState | None = None, meta: dict | None = None) -> bytes:
    layers, blobs = [], []
    offset = 0
    for i, layer in enumerate(model.layers):
        d = _layer_header(layer)
        entries = []
        for name in _ARRAYS.get(layer.kind, ()):
            arr = np.ascontiguousarray(getattr(layer, name), dtype="<f4")
            raw = arr.tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                            "nbytes": len(raw), "crc32": zlib.crc32(raw)})
            blobs.append(raw)
            offset += len(raw)
        d["blobs"] = entries
        layers.append(d)
    header = {
        "n_classes": model.n_classes,
        "input_shape": list(model.input_shape),
        "layers": layers,
        "calib": None if calib is None else calib.to_dict(),
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hb), zlib.crc32(hb)) + hb + b"".join(blobs)


def _qp(d):
    return None if d is None else QuantParams.from_dict(d)


def _build_layer(i, d, arrays):
    kind = d["type"]
    if kind == "conv2d":
        return Conv2d(arrays["weight"], arrays["bias"], int(d["stride"]), int(d["padding"]),
                      int(d["bits_x"]), int(d["bits_w"]), _qp(d["qx"]), _qp(d["qw"]))
    if kind == "linear":
        return Linear(arrays["weight"], arrays["bias"], int(d["bits_x"]), int(d["bits_w"]),
                      _qp(d["qx"]), _qp(d["qw"]))
    if kind == "batchnorm2d":
        return BatchNorm2d(arrays["gamma"], arrays["beta"], arrays["mean"], arrays["var"], float(d["eps"]))
    if kind == "relu":
        return ReLU()
    if kind == "maxpool2d":
        return MaxPool2d(int(d["kernel"]), int(d["stride"]))
    if kind == "avgpool2d":
        return AvgPool2d(int(d["kernel"]), int(d["stride"]))
    if kind == "flatten":
        return Flatten()
    if kind == "save":
        return Save(d["tag"])
    if kind == "add":
        return Add(d["tag"])
    raise ModelFileError(f"layer {i}: unsupported layer type {kind!r}")


def model_from_bytes(data: bytes, source: str = "<bytes>"):
    """Inverse of ``model_to_bytes``; returns ``(model, calib_state_or_None, meta)``."""
    if len(data) < _PREFIX.size:
        raise ModelFileError(f"{source}: file too short ({len(data)} bytes) for the container prefix")
    magic, version, hlen, hcrc = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ModelFileError(f"{source}: not a model file (magic {magic!r})")
    if version != VERSION:
        raise VersionMismatch(f"{source}: container version {version}, this reader supports {VERSION}")
    start = _PREFIX.size
    hb = data[start:start + hlen]
    if len(hb) != hlen:
        raise ModelFileError(f"{source}: header truncated ({len(hb)} of {hlen} bytes)")
    if zlib.crc32(hb) != hcrc:
        raise ChecksumError(f"{source}: header checksum mismatch")
    header = json.loads(hb.decode("utf-8"))
    body = memoryview(data)[start + hlen:]
    layers = []
    for i, d in enumerate(header["layers"]):
        arrays = {}
        for b in d.get("blobs", []):
            expect = 4 * int(np.prod(b["shape"], dtype=np.int64))
            where = f"{source}: layer {i} ({d['type']}) blob {b['name']!r}"
            if b["nbytes"] != expect:
                raise BlobSizeError(f"{where}: {b['nbytes']} bytes recorded, shape {tuple(b['shape'])} needs {expect}")
            raw = bytes(body[b["offset"]:b["offset"] + b["nbytes"]])
            if len(raw) != b["nbytes"]:
                raise BlobSizeError(f"{where}: only {len(raw)} of {b['nbytes']} bytes present")
            if zlib.crc32(raw) != b["crc32"]:
                raise ChecksumError(f"{where}: checksum mismatch")
            arrays[b["name"]] = np.frombuffer(raw, dtype="<f4").reshape(b["shape"]).astype(np.float32)
        layers.append(_build_layer(i, d, arrays))
    model = ModelGraph(layers, int(header["n_classes"]), tuple(header["input_shape"]))
    calib = None if header.get("calib") is None else CalibState.from_dict(header["calib"])
    return model, calib, header.get("meta", {})


def save_model(path, model: ModelGraph, calib: CalibState | None = None, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model, calib, meta))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), str(path))
