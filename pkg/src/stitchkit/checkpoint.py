"""Parameter checkpoint format.

A checkpoint is a JSON manifest plus a little-endian float32 blob. The
manifest lists, per parameter: name, shape, byte offset into the blob and
whether it is trainable. Buffers (norm running statistics) are stored the
same way with trainable=false.
"""

import json
from pathlib import Path

import numpy as np

MANIFEST_SUFFIX = ".manifest.json"
BLOB_SUFFIX = ".blob"
FORMAT_VERSION = 1


def save_params(entries, prefix):
    """entries: iterable of (name, ndarray, trainable). prefix: path without
    suffix; writes prefix.manifest.json and prefix.blob."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "dtype": "<f4", "params": []}
    offset = 0
    chunks = []
    for name, arr, trainable in entries:
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        manifest["params"].append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "trainable": bool(trainable),
            }
        )
        chunks.append(flat.tobytes())
        offset += flat.nbytes
    with open(str(prefix) + MANIFEST_SUFFIX, "w") as f:
        json.dump(manifest, f, indent=1)
    with open(str(prefix) + BLOB_SUFFIX, "wb") as f:
        f.write(b"".join(chunks))


def load_params(prefix):
    """Returns dict name -> (ndarray float32, trainable)."""
    prefix = Path(prefix)
    with open(str(prefix) + MANIFEST_SUFFIX) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    blob = Path(str(prefix) + BLOB_SUFFIX).read_bytes()
    out = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        out[entry["name"]] = (arr.reshape(shape).copy(), entry["trainable"])
    return out
