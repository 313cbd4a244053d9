"""Raster, CSV and manifest I/O.

Portable graymap (P2/P5) is always available; PNG goes through Pillow.
Every writer is atomic: data lands in a temporary sibling file that is
renamed over the target only after it has been fully written.
"""
from __future__ import annotations

import csv
import io
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ImageFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --------------------------------------------------------------------------
# netpbm

_WS = b" \t\r\n\x0b\x0c"


def _header_tokens(data: bytes, path, count: int):
    """Read ``count`` whitespace-separated header integers after the magic.

    Returns ``(values, starts, end)`` with each field's byte offset.
    """
    pos = 2
    out = []
    starts = []
    while len(out) < count:
        while pos < len(data) and (data[pos] in _WS or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < len(data) and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        tok = data[start:pos]
        if not tok:
            raise ImageFormatError(path, start, "unexpected end of header")
        if not tok.isdigit():
            raise ImageFormatError(path, start, f"expected an integer header field, got {tok[:16]!r}")
        out.append(int(tok))
        starts.append(start)
    return out, starts, pos


def decode_netpbm(data: bytes, path="<bytes>") -> np.ndarray:
    if len(data) < 2 or data[:1] != b"P" or data[1:2] not in b"2356":
        raise ImageFormatError(path, 0, "not a P2/P3/P5/P6 netpbm file")
    kind = data[1:2]
    (w, h, maxval), starts, pos = _header_tokens(data, path, 3)
    if w < 1 or h < 1:
        raise ImageFormatError(path, starts[0] if w < 1 else starts[1], f"invalid extents {w}x{h}")
    if not 1 <= maxval <= 255:
        raise ImageFormatError(path, starts[2], f"maxval {maxval} unsupported (8-bit only)")
    channels = 3 if kind in b"36" else 1
    n = w * h * channels
    if kind in b"56":
        if pos >= len(data) or data[pos] not in _WS:
            raise ImageFormatError(path, pos, "missing whitespace after header")
        pos += 1
        if len(data) - pos < n:
            raise ImageFormatError(path, len(data), f"pixel data truncated: need {n} bytes, have {len(data) - pos}")
        arr = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).copy()
    else:
        vals = []
        while len(vals) < n:
            while pos < len(data) and data[pos] in _WS:
                pos += 1
            start = pos
            while pos < len(data) and data[pos] not in _WS:
                pos += 1
            tok = data[start:pos]
            if not tok:
                raise ImageFormatError(path, start, f"pixel data truncated after {len(vals)} values")
            if not tok.isdigit():
                raise ImageFormatError(path, start, f"invalid pixel value {tok[:16]!r}")
            vals.append(int(tok))
        arr = np.array(vals)
        if arr.max(initial=0) > maxval:
            raise ImageFormatError(path, pos, "pixel value exceeds maxval")
        arr = arr.astype(np.uint8)
    if channels == 3:
        return arr.reshape(h, w, 3)
    return arr.reshape(h, w)


def encode_pgm(image: np.ndarray) -> bytes:
    a = np.asarray(image, dtype=np.uint8)
    return f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    a = np.asarray(rgb, dtype=np.uint8)
    return f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes()


def to_gray(rgb: np.ndarray) -> np.ndarray:
    # ITU-R BT.601 luma
    g = rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114
    return np.clip(np.rint(g), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Load an 8-bit grayscale raster; colour input is converted by luminance."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        arr = _load_png(data, path)
    else:
        arr = decode_netpbm(data, path)
    if arr.ndim == 3:
        log.warning("%s: colour image converted to grayscale by luminance", path)
        arr = to_gray(arr[..., :3])
    return arr


def _load_png(data: bytes, path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(path, 0, f"unreadable PNG: {exc}") from None
    if img.mode == "L":
        return np.asarray(img, dtype=np.uint8)
    if img.mode in ("I;16", "I", "F"):
        raise ImageFormatError(path, 0, f"unsupported PNG mode {img.mode} (8-bit only)")
    return np.asarray(img.convert("RGB"), dtype=np.uint8)


def encode_image(arr: np.ndarray, path) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    if Path(path).suffix.lower() == ".png":
        from PIL import Image
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        return buf.getvalue()
    return encode_ppm(arr) if arr.ndim == 3 else encode_pgm(arr)


def save_image(image, path) -> None:
    atomic_write_bytes(path, encode_image(image, path))


def save_mask(mask, path) -> None:
    save_image(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), path)


def load_mask(path) -> np.ndarray:
    return load_image(path) >= 128


def save_overlay(rgb, path) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("overlay must be an (H, W, 3) array")
    save_image(rgb, path)


# --------------------------------------------------------------------------
# CSV


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else _fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def save_csv(path, header, rows) -> None:
    atomic_write_text(path, csv_text(header, rows))


# --------------------------------------------------------------------------
# dataset manifest: "image, mask, tag[, averaged]" per line, '#' comments,
# paths relative to the manifest's directory


@dataclass
class ManifestEntry:
    image: Path
    mask: Path | None
    tag: str
    averaged: Path | None = None


class ManifestError(ValueError):
    pass


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (3, 4):
            raise ManifestError(f"{path}:{lineno}: expected 'image, mask, tag[, averaged]', got {len(parts)} fields")

        def resolve(p):
            if p in ("", "-"):
                return None
            q = Path(p)
            return q if q.is_absolute() else base / q

        image = resolve(parts[0])
        if image is None:
            raise ManifestError(f"{path}:{lineno}: image path is required")
        out.append(ManifestEntry(image, resolve(parts[1]), parts[2], resolve(parts[3]) if len(parts) == 4 else None))
    return out


def manifest_text(entries, base=None) -> str:
    def rel(p):
        if p is None:
            return "-"
        p = Path(p)
        if base is not None:
            try:
                return str(p.relative_to(base))
            except ValueError:
                return str(p)
        return str(p)

    lines = ["# image, mask, tag, averaged"]
    for e in entries:
        fields = [rel(e.image), rel(e.mask), e.tag]
        if e.averaged is not None:
            fields.append(rel(e.averaged))
        lines.append(", ".join(fields))
    return "\n".join(lines) + "\n"
