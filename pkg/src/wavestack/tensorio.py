"""Named-tensor container: JSON header + raw little-endian tensor bytes.

Layout: 4-byte little-endian header length, UTF-8 JSON header, then the
tensors' bytes concatenated in header order. The header carries a mandatory
``version`` field, a ``tensors`` list of ``{name, shape, dtype}`` entries and
an arbitrary JSON ``meta`` object. Dtype strings are numpy codes; the default
for model weights is ``"<f4"`` but any little-endian float dtype is accepted
(training checkpoints store ``"<f8"`` so resume is bit-exact).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1

_ALLOWED_DTYPES = ("<f4", "<f8")


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = arr.dtype.newbyteorder("<").str
        if code not in _ALLOWED_DTYPES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(np.ascontiguousarray(arr, dtype=code).tobytes())
    header = {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict, dict]:
    """Return (tensors, meta). Raises FormatError on a bad container."""
    with open(path, "rb") as fh:
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise FormatError("truncated container header")
        (hlen,) = struct.unpack("<I", raw_len)
        payload = fh.read(hlen)
        if len(payload) != hlen:
            raise FormatError("truncated container header")
        try:
            header = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad container header: {exc}") from exc
        if header.get("version") != FORMAT_VERSION:
            raise FormatError(f"unsupported container version {header.get('version')!r}")
        tensors = {}
        for entry in header["tensors"]:
            dtype = entry["dtype"]
            if dtype not in _ALLOWED_DTYPES:
                raise FormatError(f"unsupported tensor dtype {dtype!r}")
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            blob = fh.read(count * np.dtype(dtype).itemsize)
            if len(blob) != count * np.dtype(dtype).itemsize:
                raise FormatError(f"truncated tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
    return tensors, header.get("meta", {})
