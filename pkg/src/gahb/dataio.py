"""On-disk interchange: packed dataset files, binary PGM, image directories.

Packed layout (all integers little-endian u32):

    b"GAHB" | version | count | height | width | pixels | JSON trailer

Pixels are count*height*width little-endian float32 in C order; the trailer
is UTF-8 JSON carrying the generating spec and per-sample metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DatasetError

MAGIC = b"GAHB"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def save_packed(path, images: np.ndarray, metas: list[dict] | None = None,
                spec: dict | None = None) -> None:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4 or images.shape[1] != 1:
        raise DatasetError(f"packed files hold (n, 1, h, w) grayscale stacks, "
                           f"got shape {images.shape}")
    n, _, h, w = images.shape
    trailer = json.dumps({"spec": spec or {}, "samples": metas or []},
                         sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, h, w))
        f.write(np.ascontiguousarray(images[:, 0], dtype="<f4").tobytes())
        f.write(trailer)


def load_packed(path) -> tuple[np.ndarray, dict]:
    """Returns ((n, 1, h, w) float32 images, trailer dict)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated packed file")
    magic, version, n, h, w = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    body = n * h * w * 4
    start = _HEADER.size
    if len(raw) < start + body:
        raise DatasetError(f"{path}: truncated pixel payload")
    pixels = np.frombuffer(raw, dtype="<f4", count=n * h * w, offset=start)
    images = pixels.reshape(n, 1, h, w).copy()
    trailer_bytes = raw[start + body:]
    try:
        trailer = json.loads(trailer_bytes.decode("utf-8")) if trailer_bytes else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: corrupt metadata trailer: {exc}") from exc
    return images, trailer


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; values are clipped to [0, 1] and rounded."""
    image = np.asarray(image)
    if image.ndim == 4:
        image = image[0, 0]
    if image.ndim != 2:
        raise DatasetError(f"write_pgm wants a single 2-D image, got {image.shape}")
    h, w = image.shape
    quant = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(quant.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary PGM to (h, w) float64 in [0, 1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DatasetError(f"{path}: not a binary PGM (P5) file")
    # header tokens: magic, width, height, maxval; comments start with '#'
    tokens, pos = [], 2
    while len(tokens) < 3 and pos < len(raw):
        ch = raw[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    if len(raw) - pos < h * w:
        raise DatasetError(f"{path}: truncated PGM payload")
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos)
    return data.reshape(h, w).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# generic image directories


def bilinear_resize(image: np.ndarray, size) -> np.ndarray:
    """Resample to (h, w) with bilinear interpolation at pixel centers."""
    h_out, w_out = size
    h_in, w_in = image.shape
    if (h_in, w_in) == (h_out, w_out):
        return image.copy()
    ys = (np.arange(h_out) + 0.5) * (h_in / h_out) - 0.5
    xs = (np.arange(w_out) + 0.5) * (w_in / w_out) - 0.5
    ys = np.clip(ys, 0, h_in - 1)
    xs = np.clip(xs, 0, w_in - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bot = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def load_image_dir(path, size) -> tuple[np.ndarray, list[dict]]:
    """Load every image in a directory, sorted by filename.

    PGM is parsed natively; other formats go through Pillow with grayscale
    conversion by channel mean. Everything is bilinearly resampled to
    ``size`` and scaled to [0, 1].
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{path}: not a directory")
    files = sorted(p for p in root.iterdir() if p.is_file())
    if not files:
        raise DatasetError(f"{path}: no files found")
    out, metas = [], []
    for p in files:
        try:
            if p.suffix.lower() == ".pgm":
                img = read_pgm(p)
            else:
                from PIL import Image
                with Image.open(p) as im:
                    arr = np.asarray(im, dtype=np.float64)
                if arr.ndim == 3:
                    arr = arr.mean(axis=2)
                img = arr / 255.0
        except DatasetError:
            raise
        except Exception as exc:
            raise DatasetError(f"{p}: unreadable image: {exc}") from exc
        out.append(bilinear_resize(img, size))
        metas.append({"kind": "image_dir", "file": p.name})
    return np.stack(out)[:, None], metas
