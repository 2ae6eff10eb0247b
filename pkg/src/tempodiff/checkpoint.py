"""Binary checkpoint container.

Layout: the magic line ``TEMPODIFF-CKPT-v1\\n``, an 8-byte little-endian
header length, a UTF-8 JSON header, then every array as raw little-endian
float64 in row-major order at the offsets listed in the header.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .nn import AdamWState, Param

MAGIC = b"TEMPODIFF-CKPT-v1\n"
FORMAT_VERSION = "TEMPODIFF-CKPT-v1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, optimizer=None, meta=None):
    """Write parameters (a name -> Param dict), optional AdamW state and JSON-able metadata."""
    entries, blobs, offset = [], [], 0

    def add(kind, name, arr):
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"kind": kind, "name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes

    for name, p in params.items():
        add("param", name, p.value)
    header = {"entries": entries, "meta": meta or {}}
    if optimizer is not None:
        for name in params:
            add("m", name, optimizer.m[name])
            add("v", name, optimizer.v[name])
        header["optimizer"] = {k: getattr(optimizer, k) for k in
                               ("step", "lr0", "weight_decay", "beta1", "beta2", "eps")}
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns ``(params, optimizer_or_None, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a {FORMAT_VERSION} checkpoint")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        header = json.loads(raw[pos:pos + hlen].decode())
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = raw[pos + hlen:]
    params, m, v = {}, {}, {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
        if e["kind"] == "param":
            params[e["name"]] = Param(e["name"], arr)
        else:
            (m if e["kind"] == "m" else v)[e["name"]] = arr
    opt = None
    if "optimizer" in header:
        opt = AdamWState(m=m, v=v, **header["optimizer"])
    return params, opt, header["meta"]
