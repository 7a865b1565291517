"""``PPRC`` checkpoint container.

Layout: magic ``PPRC``; u32 header length; UTF-8 JSON header; u32 tensor
count; then per tensor u16 name length, name, u8 kind (0 parameter,
1 buffer), u8 ndim, u32 dims, little-endian float32 payload.
"""

import json
import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"PPRC"


def write_checkpoint(path, net, header):
    header = dict(header, network=net.config)
    hb = json.dumps(header, sort_keys=True).encode()
    tensors = [(k, 0, p.value) for k, p in net.store] + [(k, 1, v) for k, v in net.store.buffers.items()]
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", len(hb)) + hb + struct.pack("<I", len(tensors)))
        for name, kind, arr in tensors:
            nb = name.encode()
            f.write(struct.pack("<HBB", len(nb), kind, arr.ndim) + nb)
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path):
    """Returns ``(header, params, buffers)``; the latter two map names to float32 arrays."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (hlen,) = r.unpack("<I", "header length")
    try:
        header = json.loads(r.take(hlen, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint header: {e}", 8) from None
    (count,) = r.unpack("<I", "tensor count")
    params, buffers = {}, {}
    for _ in range(count):
        nlen, kind, ndim = r.unpack("<HBB", "tensor record")
        name = r.take(nlen, "tensor name").decode()
        shape = r.unpack(f"<{ndim}I", "tensor shape")
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(r.take(size, f"tensor {name!r}"), dtype="<f4").reshape(shape).astype(np.float32)
        (buffers if kind else params)[name] = arr
    return header, params, buffers


def load_state(net, params, buffers):
    missing = set(k for k, _ in net.store) - set(params)
    if missing:
        raise FormatError(f"checkpoint lacks parameters {sorted(missing)}")
    for k, p in net.store:
        if params[k].shape != p.value.shape:
            raise FormatError(f"parameter {k!r} has shape {params[k].shape}, network expects {p.value.shape}")
        p.value = params[k].astype(p.value.dtype)
        p.grad = np.zeros_like(p.value)
    for k in net.store.buffers:
        net.store.buffers[k] = buffers[k].astype(net.store.buffers[k].dtype)
