"""Binary checkpoint format.

Layout: 8-byte magic ``BIDISEQ1``, a 4-byte little-endian header length,
a UTF-8 JSON header (format version, model config, vocabulary, tensor
manifest with byte offsets, training metadata), then the raw tensor
bytes in manifest order. Tensors are row-major little-endian floats
(32-bit by default; 64-bit models declare it in the manifest so a
reload reproduces forward outputs bit for bit).
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import Model, ModelConfig
from .vocab import Vocabulary

MAGIC = b"BIDISEQ1"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _vocab_hash(vocab: Vocabulary) -> str:
    return hashlib.sha256(vocab.to_json().encode("utf-8")).hexdigest()


def save_checkpoint(model: Model, path, step: int = 0, seed: int = 0,
                    metadata: dict = None, optimizer_state: dict = None) -> None:
    """Write model (and optionally optimizer moments) to ``path``."""
    tensors = {f"param/{k}": v.data for k, v in model.params.items()}
    if optimizer_state:
        for k, arr in optimizer_state.items():
            tensors[f"opt/{k}"] = np.asarray(arr)
    manifest = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"tensor {name!r} has unsupported dtype {dtype}")
        nbytes = arr.size * arr.itemsize
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        offset += nbytes
    header = {
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "vocab_hash": _vocab_hash(model.vocab),
        "tensors": manifest,
        "meta": dict(metadata or {}, step=step, seed=seed),
        "has_optimizer": bool(optimizer_state),
    }
    header_bytes = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for entry in manifest:
            arr = np.ascontiguousarray(tensors[entry["name"]])
            fh.write(arr.astype(_DTYPES[entry["dtype"]], copy=False).tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ``(model, meta)``.

    ``meta`` carries the stored step/seed plus any extra metadata and,
    when present, the optimizer moment tensors under ``optimizer``.
    """
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["version"] != FORMAT_VERSION:
            raise ValueError(
                f"{path}: format version {header['version']} unsupported "
                f"(expected {FORMAT_VERSION})"
            )
        vocab = Vocabulary.from_dict(header["vocab"])
        if _vocab_hash(vocab) != header["vocab_hash"]:
            raise ValueError(f"{path}: vocabulary hash mismatch (corrupt header?)")
        blob = fh.read()

    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        chunk = blob[start: start + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: unexpected end of tensor data at {entry['name']!r}")
        arr = np.frombuffer(chunk, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()

    config = ModelConfig.from_dict(header["config"])
    meta = dict(header["meta"])
    model = Model(config, vocab, seed=int(meta.get("seed", 0)))
    params = {
        name[len("param/"):]: arr
        for name, arr in tensors.items()
        if name.startswith("param/")
    }
    missing = set(model.params) - set(params)
    if missing:
        raise ValueError(f"{path}: checkpoint is missing tensors {sorted(missing)[:3]}")
    model.load_param_arrays(params)
    if header.get("has_optimizer"):
        meta["optimizer"] = {
            name[len("opt/"):]: arr
            for name, arr in tensors.items()
            if name.startswith("opt/")
        }
    return model, meta
