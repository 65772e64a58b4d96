"""Named-tensor table: the shared binary payload of checkpoints and plugins.

Layout (all little-endian): count u32, then per tensor
name_len u32 | name utf-8 | rank u32 | extents u32 * rank | data f32.
"""

import struct

import numpy as np

from .errors import FormatError


def write_table(fh, tensors: dict) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_table(buf: bytes, offset: int = 0):
    """Returns (tensors, next_offset); raises FormatError on truncation."""
    try:
        (count,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            name = buf[offset:offset + nlen].decode("utf-8")
            if len(buf) < offset + nlen:
                raise FormatError("tensor table truncated in name")
            offset += nlen
            (rank,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", buf, offset)
            offset += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            end = offset + 4 * n
            if len(buf) < end:
                raise FormatError(f"tensor table truncated in data of {name!r}")
            arr = np.frombuffer(buf[offset:end], dtype="<f4").reshape(shape).copy()
            offset = end
            tensors[name] = arr
        return tensors, offset
    except struct.error as exc:
        raise FormatError("tensor table truncated") from exc
