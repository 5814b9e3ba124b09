"""Image transforms and file I/O: Reinhard tonemap, sRGB transfer, 8-bit
PNG export, and a tiny lossless float container for HDR/depth data.

The float container layout is:

    bytes 0..3   magic  b"SFI1"
    bytes 4..7   header length (uint32, little-endian)
    header       UTF-8 JSON: {"width", "height", "channels", "dtype"}
    data         raw C-order array bytes in the stated dtype

Writes are byte-deterministic (JSON keys sorted), so repeated exports of
identical data compare equal.
"""

import json
import struct

import numpy as np
from PIL import Image

from .errors import SchemaError

_MAGIC = b"SFI1"


def reinhard(x):
    """Simple global tonemap x / (1 + x), HDR -> [0, 1)."""
    x = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    return x / (1.0 + x)


def srgb_encode(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    lo = x <= 0.0031308
    out = np.where(lo, 12.92 * x, 1.055 * np.power(np.maximum(x, 1e-12), 1 / 2.4) - 0.055)
    return np.clip(out, 0.0, 1.0)


def srgb_decode(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    lo = x <= 0.04045
    return np.where(lo, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def to_display(x):
    """Linear HDR -> 8-bit display values (Reinhard + sRGB)."""
    return np.round(srgb_encode(reinhard(x)) * 255.0).astype(np.uint8)


def save_png(path, img, tonemap=True):
    """Write an image as 8-bit PNG.

    Float input is treated as linear HDR and tonemapped/encoded unless
    `tonemap` is False, in which case it is assumed to already be display
    values in [0, 1]. uint8 passes through untouched.
    """
    img = np.asarray(img)
    if img.dtype != np.uint8:
        if tonemap:
            img = to_display(img)
        else:
            img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "L" if img.ndim == 2 else "RGB"
    Image.fromarray(img, mode=mode).save(path, format="PNG")


def load_png(path, linear=True):
    """Read a PNG; returns linear float by default (sRGB decoded)."""
    arr = np.asarray(Image.open(path).convert("RGB"))
    if not linear:
        return arr
    return srgb_decode(arr.astype(np.float64) / 255.0)


def save_float_image(path, arr):
    """Write a float image losslessly in the documented container."""
    arr = np.ascontiguousarray(arr)
    if arr.ndim == 2:
        h, w, c = arr.shape[0], arr.shape[1], 1
    elif arr.ndim == 3:
        h, w, c = arr.shape
    else:
        raise ValueError("expected an HxW or HxWxC array")
    header = json.dumps({"width": w, "height": h, "channels": c,
                         "dtype": arr.dtype.name}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(arr.tobytes())


def load_float_image(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise SchemaError(f"{path}: not a float-image container")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        try:
            w, h, c = header["width"], header["height"], header["channels"]
            dtype = np.dtype(header["dtype"])
        except KeyError as e:
            raise SchemaError(f"{path}: header missing {e}") from e
        data = np.frombuffer(f.read(), dtype=dtype)
    expect = h * w * c
    if data.size != expect:
        raise SchemaError(f"{path}: payload has {data.size} values, "
                          f"header implies {expect}")
    arr = data.reshape(h, w, c)
    return arr[:, :, 0] if c == 1 else arr
