"""Flat binary checkpoint container.

Layout: magic b"OCTK" | u32 version (LE) | u64 manifest length (LE) |
manifest JSON (UTF-8) | packed little-endian f64 array data. The manifest
holds the model config and one record per array: dotted parameter path,
shape, dtype, and byte offset into the data section. Round trips are
bit-exact.
"""
import dataclasses
import json
import struct

import numpy as np

from . import tree

MAGIC = b"OCTK"
VERSION = 1


def save_model(path, model):
    records, chunks, offset = [], [], 0
    for name, arr in tree.iter_arrays(model):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        records.append({"name": name, "shape": list(arr.shape),
                        "dtype": "<f8", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({
        "config": dataclasses.asdict(model.config),
        "arrays": records,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in chunks:
            f.write(raw)


def load_model(path):
    from . import model as model_mod

    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        data = f.read()

    stored = {}
    for rec in manifest["arrays"]:
        n = int(np.prod(rec["shape"], dtype=np.int64)) if rec["shape"] else 1
        start = rec["offset"]
        arr = np.frombuffer(data, dtype=rec["dtype"], count=n, offset=start)
        stored[rec["name"]] = arr.reshape(rec["shape"]).astype(np.float64)

    cfg = model_mod.ModelConfig(**manifest["config"])
    skeleton = model_mod.build_model(cfg)

    def fill(name, arr):
        if name not in stored:
            raise ValueError(f"{path}: checkpoint missing array {name}")
        if tuple(stored[name].shape) != arr.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        return stored[name]

    loaded = tree.map_arrays_with_path(fill, skeleton)
    seen = {name for name, _ in tree.iter_arrays(loaded)}
    extra = set(stored) - seen
    if extra:
        raise ValueError(f"{path}: unexpected arrays {sorted(extra)}")
    return loaded
