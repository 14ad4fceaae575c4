"""VSPF: a bit-exact little-endian tensor container.

Layout: magic "VSPF", version u32, dtype code u8 (1 = float32, 2 = float64),
ndim u32, dims u32[ndim], then the payload row-major. Round trips preserve
every bit. Checkpoints reuse the same container: all parameter values are
concatenated into one 1-D payload, and a JSON manifest alongside the file
records each parameter's name, shape and element offset.
"""

import json
import struct

import numpy as np

from .tensor import Parameter, Tensor

MAGIC = b"VSPF"
VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class FormatError(Exception):
    """Malformed or unacceptable VSPF content; `code` names the failure."""

    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


def _as_array(tensor):
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if arr.dtype not in _CODE_FOR:
        raise FormatError("bad-dtype", f"cannot store dtype {arr.dtype}")
    return arr


def dumps(tensor):
    """Serialize a tensor (or ndarray) to VSPF bytes."""
    arr = _as_array(tensor)
    header = MAGIC + struct.pack("<IB", VERSION, _CODE_FOR[arr.dtype])
    header += struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                               copy=False)
    return header + payload.tobytes()


def loads(blob, dtype=None):
    """Parse VSPF bytes into a Tensor.

    With `dtype` given, a file of a wider dtype is rejected rather than
    silently narrowed; widening float32 content to float64 is exact and
    allowed.
    """
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("bad-magic", "not a VSPF file")
    if len(blob) < 13:
        raise FormatError("truncated-header", "header cut short")
    version, code = struct.unpack("<IB", blob[4:9])
    if version != VERSION:
        raise FormatError("bad-version", f"unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError("bad-dtype", f"unknown dtype code {code}")
    (ndim,) = struct.unpack("<I", blob[9:13])
    dims_end = 13 + 4 * ndim
    if len(blob) < dims_end:
        raise FormatError("truncated-header", "dimension list cut short")
    dims = struct.unpack(f"<{ndim}I", blob[13:dims_end])
    file_dtype = _DTYPE_CODES[code]
    count = 1
    for d in dims:
        count *= d
    expected = count * file_dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) < expected:
        raise FormatError(
            "short-payload",
            f"payload holds {len(payload)} bytes, header promises {expected}",
        )
    if len(payload) > expected:
        raise FormatError(
            "trailing-data", f"{len(payload) - expected} bytes after payload"
        )
    arr = np.frombuffer(payload, dtype=file_dtype).reshape(dims)
    arr = arr.astype(file_dtype.newbyteorder("="), copy=True)
    if dtype is not None:
        target = np.dtype(dtype)
        if target.itemsize < arr.dtype.itemsize:
            raise FormatError(
                "dtype-narrowing",
                f"file holds {arr.dtype}, refusing silent narrowing to {target}",
            )
        arr = arr.astype(target, copy=False)
    return Tensor(arr)


def save_features(path, tensor):
    with open(path, "wb") as fh:
        fh.write(dumps(tensor))


def load_features(path, dtype=None):
    with open(path, "rb") as fh:
        return loads(fh.read(), dtype=dtype)


# ---------------------------------------------------------------------------
# parameter checkpoints


def _manifest_path(path):
    return str(path) + ".manifest.json"


def save_checkpoint(path, params):
    """Write all parameters as one VSPF payload plus a JSON manifest."""
    names = sorted(params)
    if not names:
        raise FormatError("empty-checkpoint", "no parameters to save")
    dtypes = {params[n].data.dtype for n in names}
    if len(dtypes) != 1:
        raise FormatError("bad-dtype", "parameters must share one dtype")
    entries, chunks, offset = [], [], 0
    for name in names:
        arr = params[name].data
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1))
        offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.empty(0)
    save_features(path, flat)
    manifest = {"format": "vspf-checkpoint", "count": len(names), "params": entries}
    with open(_manifest_path(path), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint back into {name: Parameter}."""
    flat = load_features(path)
    with open(_manifest_path(path), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    params = {}
    data = flat.data.reshape(-1)
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = 1
        for d in shape:
            count *= d
        start = entry["offset"]
        if start + count > data.size:
            raise FormatError(
                "short-payload",
                f"manifest entry {entry['name']} exceeds checkpoint payload",
            )
        params[entry["name"]] = Parameter(
            data[start:start + count].reshape(shape), name=entry["name"]
        )
    return params
