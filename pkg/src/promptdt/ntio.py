"""Named-tensor container file.

Layout:
  bytes 0..7    little-endian u64: byte length N of the JSON header
  bytes 8..8+N  JSON object: name -> {"dtype": "f32"|"f64", "shape": [...],
                "data_offsets": [begin, end]} with offsets relative to the
                start of the data region
  remainder     contiguous little-endian raw tensor data

Round trips are bit-exact. The header is written with sorted keys so that
identical tensor dicts always produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


def save_tensors(path, tensors: dict[str, np.ndarray]):
    """Write a name -> array mapping; arrays must be float32 or float64."""
    header = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], order="C")  # ascontiguousarray would promote 0-d to 1-d
        if arr.dtype not in _NAMES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        header[name] = {
            "dtype": _NAMES[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blobs.append(raw)
        offset += len(raw)
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for raw in blobs:
            f.write(raw)


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a named-tensor file; raises FormatError naming the bad tensor."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short for header length")
    (hdr_len,) = struct.unpack("<Q", blob[:8])
    if 8 + hdr_len > len(blob):
        raise FormatError(f"{path}: truncated header (declared {hdr_len} bytes)")
    try:
        header = json.loads(blob[8 : 8 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed JSON header: {e}") from e
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not an object")
    data = blob[8 + hdr_len :]
    out = {}
    seen_spans = []
    for name, meta in header.items():
        try:
            dtype = _DTYPES[meta["dtype"]]
            shape = tuple(int(s) for s in meta["shape"])
            begin, end = (int(v) for v in meta["data_offsets"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: bad entry for tensor {name!r}: {e}") from e
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if end - begin != nbytes:
            raise FormatError(f"{path}: tensor {name!r} span {end - begin} != shape bytes {nbytes}")
        if begin < 0 or end > len(data):
            raise FormatError(f"{path}: tensor {name!r} offsets outside data region")
        for b, e2, other in seen_spans:
            if begin < e2 and b < end:
                raise FormatError(f"{path}: tensor {name!r} overlaps tensor {other!r}")
        seen_spans.append((begin, end, name))
        out[name] = np.frombuffer(data[begin:end], dtype=dtype).reshape(shape).copy()
    return out
