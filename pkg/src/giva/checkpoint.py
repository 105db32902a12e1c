"""Manifest + blob checkpoints for adapter tensors.

A checkpoint is two files: ``<stem>.json`` (UTF-8 manifest) and
``<stem>.bin``. The blob starts with the magic ``b"GIVA"`` and a
little-endian u32 format version, followed by the tensors as little-endian
float64 in row-major order at the offsets the manifest declares. Every
tensor carries its own sha256 and the manifest stores one for the whole
blob, so truncation and bit flips are both detected on load.

Base checkpoints hold the frozen tensors (``A``/``B``, plus the residual
weight for OSoRA) and are written once per task; light checkpoints hold
only the trainable tensors.
"""

import hashlib
import json
import os
import struct

import numpy as np

from .adapters import LoraState, VectorAdapterState
from .errors import IntegrityError
from .linalg import orthonormality_residual

MAGIC = b"GIVA"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sI")
DTYPE = "<f8"

_REQUIRED = {
    "format_version": int,
    "kind": str,
    "method": str,
    "layers": dict,
    "seeds": dict,
    "hyper": dict,
    "tensors": dict,
    "blob": str,
    "blob_bytes": int,
    "payload_bytes": int,
    "content_hash": str,
}
_TENSOR_KEYS = {"offset": int, "nbytes": int, "dtype": str, "shape": list, "sha256": str}


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def _paths(stem):
    stem = os.fspath(stem)
    if stem.endswith(".json") or stem.endswith(".bin"):
        stem = stem.rsplit(".", 1)[0]
    return stem + ".json", stem + ".bin"


def validate_manifest(manifest):
    """Raise IntegrityError unless ``manifest`` matches the schema."""
    if not isinstance(manifest, dict):
        raise IntegrityError("manifest must be a JSON object")
    for key, typ in _REQUIRED.items():
        if key not in manifest:
            raise IntegrityError(f"manifest missing field {key!r}")
        if not isinstance(manifest[key], typ) or (typ is int and isinstance(manifest[key], bool)):
            raise IntegrityError(f"manifest field {key!r} must be {typ.__name__}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise IntegrityError(f"unsupported format version {manifest['format_version']}")
    if manifest["kind"] not in ("base", "light"):
        raise IntegrityError(f"unknown checkpoint kind {manifest['kind']!r}")
    for name, entry in manifest["tensors"].items():
        if not isinstance(entry, dict):
            raise IntegrityError(f"tensor {name!r}: entry must be an object")
        for key, typ in _TENSOR_KEYS.items():
            if not isinstance(entry.get(key), typ):
                raise IntegrityError(f"tensor {name!r}: field {key!r} missing or not {typ.__name__}")
        if entry["dtype"] != DTYPE:
            raise IntegrityError(f"tensor {name!r}: unsupported dtype {entry['dtype']!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["nbytes"] != 8 * count or entry["offset"] < HEADER.size:
            raise IntegrityError(f"tensor {name!r}: offset/size inconsistent with shape")
        if entry["offset"] + entry["nbytes"] > manifest["blob_bytes"]:
            raise IntegrityError(f"tensor {name!r}: extends past the end of the blob")
    return manifest


def write_checkpoint(stem, tensors, kind, method, layers, seeds=None, hyper=None):
    """Write ``tensors`` (name -> array) as a checkpoint; returns the manifest.

    Arrays that are the same object (shared bases) are stored once and
    indexed at the same offset.
    """
    json_path, bin_path = _paths(stem)
    chunks = [HEADER.pack(MAGIC, FORMAT_VERSION)]
    offset = HEADER.size
    index, seen = {}, {}
    payload = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = id(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        if key in seen:
            entry_offset = seen[key]
        else:
            entry_offset = offset
            seen[key] = offset
            chunks.append(raw)
            offset += len(raw)
            payload += len(raw)
        index[name] = {"offset": entry_offset, "nbytes": len(raw), "dtype": DTYPE,
                       "shape": list(arr.shape), "sha256": _sha256(raw)}
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "method": method,
        "layers": layers,
        "seeds": dict(seeds or {}),
        "hyper": dict(hyper or {}),
        "tensors": index,
        "blob": os.path.basename(bin_path),
        "blob_bytes": len(blob),
        "payload_bytes": payload,
        "content_hash": _sha256(blob),
    }
    os.makedirs(os.path.dirname(os.path.abspath(json_path)), exist_ok=True)
    with open(bin_path, "wb") as fh:
        fh.write(blob)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(stem):
    json_path, _ = _paths(stem)
    try:
        with open(json_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{json_path}: manifest is not valid JSON ({exc})") from None
    return validate_manifest(manifest)


def read_checkpoint(stem):
    """Load and verify a checkpoint; returns ``(manifest, {name: array})``."""
    manifest = read_manifest(stem)
    json_path, _ = _paths(stem)
    bin_path = os.path.join(os.path.dirname(os.path.abspath(json_path)), manifest["blob"])
    with open(bin_path, "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest["blob_bytes"]:
        raise IntegrityError(f"{bin_path}: expected {manifest['blob_bytes']} bytes, found {len(blob)} (truncated?)")
    if len(blob) < HEADER.size:
        raise IntegrityError(f"{bin_path}: missing header")
    magic, version = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise IntegrityError(f"{bin_path}: bad magic {magic!r}")
    if version != manifest["format_version"]:
        raise IntegrityError(f"{bin_path}: blob version {version} != manifest version {manifest['format_version']}")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        digest = _sha256(raw)
        if digest != entry["sha256"]:
            raise IntegrityError(f"tensor {name!r}: sha256 mismatch (stored {entry['sha256'][:12]}, "
                                 f"computed {digest[:12]})")
        tensors[name] = np.frombuffer(raw, dtype=DTYPE).reshape(entry["shape"]).astype(np.float64)
    digest = _sha256(blob)
    if digest != manifest["content_hash"]:
        raise IntegrityError(f"{bin_path}: content hash mismatch (stored {manifest['content_hash'][:12]}, "
                             f"computed {digest[:12]})")
    return manifest, tensors


def _layer_table(model, states):
    return {name: {"shape": list(model.layer(name).shape), "rank": int(state.rank), "method": state.method}
            for name, state in states.items()}


def _method_of(states):
    methods = sorted({s.method for s in states.values()})
    return methods[0] if len(methods) == 1 else "+".join(methods)


def save_base(stem, model, states, seeds=None, hyper=None):
    """Frozen tensors of every adapter; OSoRA also stores its residual weight."""
    tensors = {}
    for name, state in states.items():
        for key, arr in state.frozen().items():
            tensors[f"{name}.{key}"] = arr
        if state.method == "osora":
            tensors[f"{name}.W_residual"] = model.layer(name).weight
    return write_checkpoint(stem, tensors, "base", _method_of(states), _layer_table(model, states), seeds, hyper)


def save_light(stem, model, states, params=None, seeds=None, hyper=None):
    """Trainable tensors only; ``params`` ("layer.param" -> array) overrides live values."""
    tensors = {}
    for name, state in states.items():
        for key, arr in state.trainable().items():
            full = f"{name}.{key}"
            tensors[full] = arr if params is None else params.get(full, arr)
    return write_checkpoint(stem, tensors, "light", _method_of(states), _layer_table(model, states), seeds, hyper)


def load_adapters(model, base_stem, light_stem):
    """Rebuild and attach adapters from a base and a light checkpoint."""
    base_manifest, base = read_checkpoint(base_stem)
    light_manifest, light = read_checkpoint(light_stem)
    if base_manifest["layers"] != light_manifest["layers"]:
        raise IntegrityError("base and light checkpoints describe different layers")
    alpha = light_manifest["hyper"].get("alpha")
    states = {}
    for name, info in light_manifest["layers"].items():
        layer = model.layer(name)
        if list(layer.shape) != info["shape"]:
            raise IntegrityError(f"layer {name!r}: checkpoint shape {info['shape']} != model {list(layer.shape)}")
        if info["method"] == "lora":
            state = LoraState(light[f"{name}.A"], light[f"{name}.B"], alpha if alpha else 2.0 * info["rank"])
        else:
            state = VectorAdapterState(base[f"{name}.A"], base[f"{name}.B"], light[f"{name}.lam"],
                                       light[f"{name}.gamma"], info["method"])
            if info["method"] == "osora":
                layer.weight = base[f"{name}.W_residual"]
        layer.attach(state)
        states[name] = state
    return states


def inspect_checkpoint(stem):
    """JSON-ready summary: manifest plus orthonormality residuals of stored bases."""
    manifest, tensors = read_checkpoint(stem)
    residuals = {}
    for name, arr in tensors.items():
        if name.endswith(".A"):
            residuals[name] = orthonormality_residual(arr.T)
        elif name.endswith(".B") and manifest["kind"] == "base":
            residuals[name] = orthonormality_residual(arr)
    norms = {name: float(np.linalg.norm(arr)) for name, arr in tensors.items()}
    return {"manifest": manifest, "orthonormality_residuals": residuals, "tensor_norms": norms}
