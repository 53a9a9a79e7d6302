"""On-disk formats: feature files, the dual-precision model file, manifests.

Feature file (little-endian)::

    magic b"DPFT" | uint32 frames | uint32 dim | float32[frames * dim]

Model file (little-endian)::

    magic b"DPAM" | uint16 version | uint16 layers | uint16 ctx_left | uint16 ctx_right
    per layer:
        uint32 n_out | uint32 n_in | uint8 activation | float64 act_scale
        float64[n_out] bias
        float64 scale_8 | int8[n_out * n_in] codes (row-major)
        float64 scale_4 | uint8[ceil(n_out * n_in / 2)] packed 4-bit codes,
                          two per byte, low nibble first

Manifest: one utterance per line, ``name<TAB>feature path<TAB>reference``;
relative paths are resolved against the manifest's directory.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .qnn import Activation, ContextSpec, QuantizedModel, QuantLayer

FEATURE_MAGIC = b"DPFT"
MODEL_MAGIC = b"DPAM"
MODEL_VERSION = 1


class FormatError(ValueError):
    pass


def write_features(path, feats: np.ndarray) -> None:
    arr = np.ascontiguousarray(feats, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("features must be a (frames, dim) matrix")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<II", *arr.shape))
        f.write(arr.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC or len(data) < 12:
        raise FormatError(f"{path}: not a feature file")
    frames, dim = struct.unpack_from("<II", data, 4)
    body = np.frombuffer(data, dtype="<f4", offset=12)
    if body.size != frames * dim:
        raise FormatError(f"{path}: expected {frames * dim} values, found {body.size}")
    feats = body.reshape(frames, dim).astype(np.float32)
    if not np.all(np.isfinite(feats)):
        raise FormatError(f"{path}: non-finite feature values")
    return feats


def pack_int4(codes: np.ndarray) -> bytes:
    flat = np.asarray(codes, dtype=np.int64).ravel() & 0xF
    if flat.size % 2:
        flat = np.append(flat, 0)
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(data: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    nib = np.empty(raw.size * 2, dtype=np.int64)
    nib[0::2] = raw & 0xF
    nib[1::2] = raw >> 4
    nib = nib[:count]
    return ((nib ^ 8) - 8).astype(np.int8)


def model_to_bytes(model: QuantizedModel) -> bytes:
    out = [MODEL_MAGIC, struct.pack("<HHHH", MODEL_VERSION, len(model.layers),
                                     model.context.left, model.context.right)]
    for layer in model.layers:
        n_out, n_in = layer.codes8.shape
        out.append(struct.pack("<IIBd", n_out, n_in, layer.activation.value, layer.act_scale))
        out.append(np.asarray(layer.bias, dtype="<f8").tobytes())
        out.append(struct.pack("<d", layer.scale8))
        out.append(np.asarray(layer.codes8, dtype=np.int8).tobytes())
        out.append(struct.pack("<d", layer.scale4))
        out.append(pack_int4(layer.codes4))
    return b"".join(out)


def model_from_bytes(data: bytes) -> QuantizedModel:
    if data[:4] != MODEL_MAGIC:
        raise FormatError("not a model file")
    try:
        version, n_layers, left, right = struct.unpack_from("<HHHH", data, 4)
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model version {version}")
        pos = 12
        layers = []
        for _ in range(n_layers):
            n_out, n_in, act, act_scale = struct.unpack_from("<IIBd", data, pos)
            pos += struct.calcsize("<IIBd")
            n = n_out * n_in
            bias = np.frombuffer(data, dtype="<f8", count=n_out, offset=pos).astype(np.float64)
            pos += 8 * n_out
            (s8,) = struct.unpack_from("<d", data, pos)
            pos += 8
            c8 = np.frombuffer(data, dtype=np.int8, count=n, offset=pos).reshape(n_out, n_in).copy()
            pos += n
            (s4,) = struct.unpack_from("<d", data, pos)
            pos += 8
            nbytes = (n + 1) // 2
            if pos + nbytes > len(data):
                raise FormatError("truncated model file")
            c4 = unpack_int4(data[pos:pos + nbytes], n).reshape(n_out, n_in)
            pos += nbytes
            layers.append(QuantLayer(c8, s8, c4, s4, bias, Activation(act), act_scale))
    except struct.error as exc:
        raise FormatError(f"truncated model file: {exc}") from None
    if pos != len(data):
        raise FormatError("trailing bytes in model file")
    return QuantizedModel(layers, ContextSpec(left, right))


def write_model(path, model: QuantizedModel) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def read_model(path) -> QuantizedModel:
    return model_from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    feature_path: Path
    reference: tuple[str, ...]


def write_manifest(path, entries) -> None:
    lines = [f"{e.name}\t{e.feature_path}\t{' '.join(e.reference)}\n" for e in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'name<TAB>features<TAB>reference'")
        feat = Path(parts[1])
        if not feat.is_absolute():
            feat = path.parent / feat
        entries.append(ManifestEntry(parts[0], feat, tuple(parts[2].split())))
    return entries
