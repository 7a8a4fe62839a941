"""Small file formats: binary PGM (P5) images and IDX image files."""

from __future__ import annotations

import os
import struct

import numpy as np
import torch

IDX_IMAGE_MAGIC = 0x00000803


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def to_uint8(image, normalize: bool = False) -> np.ndarray:
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"PGM export needs a 2-d image, got shape {arr.shape}")
    if normalize:
        peak = arr.max() if arr.size else 0.0
        arr = arr / peak if peak > 0 else np.zeros_like(arr)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | os.PathLike, image, normalize: bool = False) -> None:
    """Write a P5 PGM with maxval 255. Values are read as intensities in [0, 1]."""
    data = to_uint8(image, normalize=normalize)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    pos += 1
    body = raw[pos : pos + w * h]
    if len(body) != w * h:
        raise FormatError(f"truncated PGM payload at byte offset {pos + len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


def load_idx(path: str | os.PathLike) -> list[torch.Tensor]:
    """Read an IDX image file (magic 0x00000803) into ``1 x rows x cols`` tensors in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"truncated IDX header at byte offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad IDX magic 0x{magic:08x} at byte offset 0 (expected 0x{IDX_IMAGE_MAGIC:08x})")
    if len(raw) < 16:
        raise FormatError(f"truncated IDX header at byte offset {len(raw)}")
    count, rows, cols = struct.unpack(">III", raw[4:16])
    need = count * rows * cols
    payload = raw[16 : 16 + need]
    if len(payload) < need:
        raise FormatError(f"truncated IDX payload at byte offset {16 + len(payload)} (expected {16 + need} bytes)")
    if count == 0:
        return []
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)
    images = torch.from_numpy(arr.astype(np.float32) / np.float32(255.0))
    return list(images.unbind(0))


def write_idx(path: str | os.PathLike, images) -> None:
    """Write uint8 images (``N x rows x cols``) as an IDX image file."""
    arr = np.asarray(images, dtype=np.uint8)
    if arr.ndim != 3:
        raise ValueError("write_idx expects N x rows x cols bytes")
    n, r, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, r, c))
        fh.write(arr.tobytes())
