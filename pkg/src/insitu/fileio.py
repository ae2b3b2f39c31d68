"""Array serialization: 8-bit PGM snapshots, the raw float32 container, and
the IDX digit-dataset format.

The raw container is little-endian throughout: magic "OPB1", u32 height,
u32 width, u32 dtype tag (0 = float32), then row-major float32 samples.
PGM files are binary P5 with the original value range recorded in a header
comment so the linear 0..255 mapping can be undone.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

RAW_MAGIC = b"OPB1"
RAW_DTYPE_F32 = 0


def write_raw(path, array) -> None:
    """Write a 2-D float array as the raw float32 container."""
    a = np.asarray(array, dtype=np.float32)
    if a.ndim != 2:
        raise ValueError(f"raw container stores 2-D arrays, got shape {a.shape}")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<III", h, w, RAW_DTYPE_F32))
        f.write(a.astype("<f4", copy=False).tobytes(order="C"))


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes, need 16)")
    if blob[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at offset 0")
    h, w, tag = struct.unpack("<III", blob[4:16])
    if tag != RAW_DTYPE_F32:
        raise FormatError(f"{path}: unknown dtype tag {tag} at offset 12")
    need = 16 + 4 * h * w
    if len(blob) != need:
        raise FormatError(f"{path}: expected {need} bytes for {h}x{w} f32, got {len(blob)}")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(h, w).astype(np.float64)


def write_pgm(path, array) -> None:
    """Write a 2-D array as binary PGM, min/max mapped to 0..255.

    The original range is kept in a header comment line ("# min=... max=...")
    so read_pgm can restore physical units.
    """
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"PGM stores 2-D arrays, got shape {a.shape}")
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo
    if span > 0:
        q = np.round((a - lo) / span * 255.0).astype(np.uint8)
    else:
        q = np.zeros_like(a, dtype=np.uint8)
    h, w = a.shape
    header = f"P5\n# min={lo!r} max={hi!r}\n{w} {h}\n255\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(q.tobytes(order="C"))


def read_pgm(path):
    """Read a PGM written by write_pgm. Returns (float array, lo, hi).

    Values are mapped back onto [lo, hi]; files without the range comment
    (plain third-party PGMs) come back in [0, 255] with lo=0, hi=255.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (magic {blob[:2]!r})")
    # tokenize the header, honouring comment lines
    pos = 2
    fields = []
    lo = hi = None
    while len(fields) < 3:
        if pos >= len(blob):
            raise FormatError(f"{path}: header ended early at offset {pos}")
        c = blob[pos:pos + 1]
        if c == b"#":
            eol = blob.find(b"\n", pos)
            if eol < 0:
                raise FormatError(f"{path}: unterminated comment at offset {pos}")
            comment = blob[pos + 1:eol].decode("ascii", "replace").strip()
            parts = dict(p.split("=", 1) for p in comment.split() if "=" in p)
            if "min" in parts and "max" in parts:
                lo, hi = float(parts["min"]), float(parts["max"])
            pos = eol + 1
        elif c.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            fields.append(blob[pos:end])
            pos = end
    try:
        w, h, maxval = (int(t) for t in fields)
    except ValueError:
        raise FormatError(f"{path}: non-numeric header fields {fields}") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    data = blob[pos:pos + h * w]
    if len(data) != h * w:
        raise FormatError(f"{path}: expected {h * w} pixels, got {len(data)}")
    q = np.frombuffer(data, dtype=np.uint8).reshape(h, w)
    if lo is None:
        lo, hi = 0.0, 255.0
    return lo + q.astype(np.float64) / 255.0 * (hi - lo), lo, hi


# IDX, the big-endian digit dataset container.

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated image header ({len(blob)} bytes) at offset 0")
    magic, n, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad image magic 0x{magic:08x} at offset 0")
    need = 16 + n * rows * cols
    if len(blob) != need:
        raise FormatError(f"{path}: {n} images of {rows}x{cols} need {need} bytes, "
                          f"got {len(blob)} (offset {min(len(blob), need)})")
    return np.frombuffer(blob[16:], dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated label header ({len(blob)} bytes) at offset 0")
    magic, n = struct.unpack(">II", blob[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad label magic 0x{magic:08x} at offset 0")
    if len(blob) != 8 + n:
        raise FormatError(f"{path}: {n} labels need {8 + n} bytes, got {len(blob)} "
                          f"(offset {min(len(blob), 8 + n)})")
    return np.frombuffer(blob[8:], dtype=np.uint8)


def write_idx_images(path, images) -> None:
    a = np.asarray(images, dtype=np.uint8)
    if a.ndim != 3:
        raise ValueError(f"expected (n, rows, cols) uint8, got shape {a.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *a.shape))
        f.write(a.tobytes(order="C"))


def write_idx_labels(path, labels) -> None:
    a = np.asarray(labels, dtype=np.uint8)
    if a.ndim != 1:
        raise ValueError(f"expected 1-D uint8 labels, got shape {a.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, a.size))
        f.write(a.tobytes(order="C"))
