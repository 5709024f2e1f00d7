"""Image container and PNG/PPM input-output."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as _PIL


@dataclass
class Image:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray | None = None  # (H, W) in [0, 1]; opaque when omitted

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.alpha is None:
            self.alpha = np.ones(self.rgb.shape[:2])
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3 or self.alpha.shape != self.rgb.shape[:2]:
            raise ValueError(f"bad image shapes rgb={self.rgb.shape} alpha={self.alpha.shape}")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def copy(self) -> "Image":
        return Image(self.rgb.copy(), self.alpha.copy())


def save_png(image: Image, path) -> None:
    rgba = np.concatenate([image.rgb, image.alpha[..., None]], axis=2)
    data = np.round(np.clip(rgba, 0.0, 1.0) * 255.0).astype(np.uint8)
    _PIL.fromarray(data, mode="RGBA").save(path, format="PNG")


def load_image(path) -> Image:
    """Read a PNG or PPM file into a float image (alpha defaults to 1)."""
    with _PIL.open(Path(path)) as im:
        im.load()
        if im.mode in ("RGBA", "LA") or "transparency" in im.info:
            data = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
            return Image(data[..., :3], data[..., 3])
        data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return Image(data, np.ones(data.shape[:2]))
