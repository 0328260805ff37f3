"""PNG read/write through Pillow, with a plain-PPM fallback reader and writer."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def write_png(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = to_uint8(image) if np.asarray(image).dtype != np.uint8 else np.asarray(image)
    Image.fromarray(arr).save(Path(path), format="PNG")


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = to_uint8(image)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr[..., :3].tobytes())


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Load PNG or PPM as an ``(H, W, 3)`` float32 array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr
