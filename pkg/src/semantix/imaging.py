"""PNG input/output. Images are float ``[H, W, 3]`` arrays in [0, 1]."""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

FRAME_PATTERN = "frame_{:04d}.png"


def read_image(path, size: int = 0) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input image not found: {path}")
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size:
            im = im.resize((size, size), Image.BICUBIC)
        return np.asarray(im, dtype=np.float64) / 255.0


def read_frames(path, size: int = 0) -> np.ndarray:
    """A PNG file gives ``[1, H, W, 3]``; a directory gives its ``*.png``
    frames in name order."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise FileNotFoundError(f"no PNG frames in {path}")
        return np.stack([read_image(f, size) for f in files])
    return read_image(path, size)[None]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False)
    return path


def write_frames(path, frames: np.ndarray) -> list:
    """One frame is written as a single PNG at ``path``; several go into the
    directory ``path.with_suffix('')`` as ``frame_%04d.png``."""
    path = Path(path)
    if frames.shape[0] == 1:
        return [write_image(path, frames[0])]
    folder = path.with_suffix("")
    return [write_image(folder / FRAME_PATTERN.format(i), f) for i, f in enumerate(frames)]


def sha256_path(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(path.glob("*.png")) if path.is_dir() else [path]
    for f in files:
        h.update(f.name.encode() if path.is_dir() else b"")
        h.update(f.read_bytes())
    return h.hexdigest()
