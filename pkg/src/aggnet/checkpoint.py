"""Single-file parameter checkpoints.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header
describing every layer's parameters (names, shapes, dtype) plus optional
caller metadata, then the raw little-endian float64 blobs concatenated in
declaration order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC_DTYPE = "<f8"


def save_checkpoint(model, path, extra: dict | None = None):
    """Write all model parameters to ``path``."""
    layers_meta = []
    blobs = []
    for li, layer in enumerate(model.layers):
        entry = {"index": li, "type": type(layer).__name__, "params": []}
        for p in layer.params():
            entry["params"].append(
                {"name": p.name, "shape": list(p.data.shape), "dtype": MAGIC_DTYPE}
            )
            blobs.append(np.ascontiguousarray(p.data, dtype=MAGIC_DTYPE).tobytes())
        layers_meta.append(entry)
    header = {"format": "aggnet-checkpoint", "version": 1, "layers": layers_meta}
    if extra:
        header["extra"] = extra
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)


def read_header(path) -> dict:
    """Return just the JSON header of a checkpoint file."""
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(hlen).decode("utf-8"))


def load_checkpoint(model, path):
    """Load parameters from ``path`` into an already-built model.

    Layer structure and shapes must match exactly.  Returns the header.
    """
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        layers_meta = header["layers"]
        if len(layers_meta) != len(model.layers):
            raise ValueError(
                f"checkpoint has {len(layers_meta)} layers, model has {len(model.layers)}"
            )
        for layer, meta in zip(model.layers, layers_meta):
            params = layer.params()
            if len(params) != len(meta["params"]):
                raise ValueError(f"parameter count mismatch in layer {meta['index']}")
            for p, pm in zip(params, meta["params"]):
                shape = tuple(pm["shape"])
                if p.name != pm["name"] or p.data.shape != shape:
                    raise ValueError(
                        f"mismatch: checkpoint {pm['name']}{shape} vs model "
                        f"{p.name}{p.data.shape}"
                    )
                count = int(np.prod(shape)) if shape else 1
                buf = f.read(count * 8)
                if len(buf) != count * 8:
                    raise ValueError("checkpoint truncated")
                p.data = np.frombuffer(buf, dtype=pm["dtype"]).reshape(shape).astype(np.float64)
    return header
