"""Binary tensor files (SPTN) and binary PPM image ingestion.

SPTN layout::

    b"SPTN" | u8 version (=1) | u8 dtype (0=f64, 1=f32) | u8 rank
    | u32 dims[rank] (little endian) | raw little-endian values, row-major
"""

import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"SPTN"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}


def dumps_tensor(arr, dtype="f64"):
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise ShapeError(f"SPTN supports rank <= 4, got {arr.ndim}")
    dt = np.dtype("<f8") if dtype == "f64" else np.dtype("<f4")
    header = MAGIC + struct.pack("<BBB", VERSION, _CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def read_tensor_from(stream, path=None):
    """Read one SPTN record from a binary stream positioned at its magic."""
    start = stream.tell()

    def take(n):
        buf = stream.read(n)
        if len(buf) != n:
            raise FormatError("truncated SPTN record", path, stream.tell())
        return buf

    if take(4) != MAGIC:
        raise FormatError("bad SPTN magic", path, start)
    version, code, rank = struct.unpack("<BBB", take(3))
    if version != VERSION:
        raise FormatError(f"unsupported SPTN version {version}", path, start + 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown SPTN dtype code {code}", path, start + 5)
    if rank > 4:
        raise FormatError(f"SPTN rank {rank} exceeds 4", path, start + 6)
    dims = struct.unpack(f"<{rank}I", take(4 * rank))
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(take(count * dt.itemsize), dtype=dt)
    arr = data.astype(np.float64).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise FormatError("SPTN payload contains non-finite values", path, start)
    return arr


def loads_tensor(buf, path=None):
    stream = io.BytesIO(buf)
    arr = read_tensor_from(stream, path)
    if stream.read(1):
        raise FormatError("trailing bytes after SPTN record", path, stream.tell() - 1)
    return arr


def save_tensor(path, arr, dtype="f64"):
    Path(path).write_bytes(dumps_tensor(arr, dtype))


def load_tensor(path):
    return loads_tensor(Path(path).read_bytes(), path=str(path))


def _ppm_tokens(buf, path):
    """Return the four PPM header fields with their offsets, and the header end."""
    pos = 0
    found = []
    while len(found) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", path, pos)
        found.append((buf[start:pos], start))
    return found, pos


def read_ppm(path):
    """Decode a binary P6 PPM (maxval 255) into a 3 x H x W array in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, end = _ppm_tokens(buf, str(path))
    (magic, _), (w, wo), (h, _), (mx, mo) = tokens
    if magic != b"P6":
        raise FormatError("only binary P6 PPM is supported", str(path), 0)
    try:
        width, height, maxval = int(w), int(h), int(mx)
    except ValueError:
        raise FormatError("non-numeric PPM header field", str(path), wo) from None
    if maxval != 255:
        raise FormatError(f"PPM maxval must be 255, got {maxval}", str(path), mo)
    if width <= 0 or height <= 0:
        raise FormatError("PPM dimensions must be positive", str(path), wo)
    # exactly one whitespace byte separates header from raster
    start = end + 1
    need = width * height * 3
    raster = buf[start : start + need]
    if len(raster) != need:
        raise FormatError("truncated PPM raster", str(path), start + len(raster))
    pix = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"PPM export needs a 3 x H x W image, got {img.shape}")
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    header = f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode()
    Path(path).write_bytes(header + pix.tobytes())


def load_image(path):
    """Load an image from ``.ppm`` or SPTN, dispatching on the file magic."""
    head = Path(path).read_bytes()[:4]
    if head[:2] == b"P6":
        return read_ppm(path)
    if head == MAGIC:
        return load_tensor(path)
    raise FormatError("unrecognised image format", str(path), 0)
