"""Image buffers on disk: binary PPM frames, raw float32 buffers, PSNR."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

PSNR_CAP_DB = 99.0


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (h, w, 3) float image in [0, 1] as binary PPM (P6, 8-bit)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError("expected an (h, w, 3) image")
    data = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (h, w, 3) float image in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM")
    # header: magic, width, height, maxval, single whitespace, then pixels
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    if pix.size != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


_F32_MAGIC = b"f32buf v1\n"


def write_f32(path, buf: np.ndarray) -> None:
    """Write a float buffer (h, w[, c]) as raw little-endian float32."""
    buf = np.asarray(buf, dtype=np.float64)
    if buf.ndim == 2:
        buf = buf[:, :, None]
    h, w, c = buf.shape
    with open(path, "wb") as f:
        f.write(_F32_MAGIC)
        f.write(struct.pack("<3I", w, h, c))
        f.write(buf.astype("<f4").tobytes())


def read_f32(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(_F32_MAGIC))
        if magic != _F32_MAGIC:
            raise FormatError(f"{path}: bad f32 buffer magic")
        w, h, c = struct.unpack("<3I", f.read(12))
        data = np.frombuffer(f.read(4 * w * h * c), dtype="<f4")
    if data.size != w * h * c:
        raise FormatError(f"{path}: truncated f32 buffer")
    out = data.reshape(h, w, c).astype(np.float64)
    return out[:, :, 0] if c == 1 else out


def read_image(path) -> np.ndarray:
    """Read PPM or PNG into an (h, w, 3) float image in [0, 1]."""
    p = str(path)
    if p.lower().endswith(".ppm"):
        return read_ppm(p)
    from PIL import Image

    img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64)
    return img / 255.0


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped for identical pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise FormatError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))
