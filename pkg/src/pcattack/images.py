"""Image grids, PNG round trips and the bundled synthetic-shapes corpus.

Images are ``H x W x C`` float arrays in ``[0, 1]``. Tensors handed to the
networks are ``N x C x H x W`` float64.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

__all__ = [
    "ImageError",
    "check_image",
    "to_tensor",
    "to_image",
    "quantize",
    "load_png",
    "save_png",
    "load_dataset",
    "write_dataset",
    "make_shapes",
]


class ImageError(ValueError):
    pass


def check_image(image, downsample_factor: int | None = None) -> np.ndarray:
    """Validate an image grid and return it as a float64 ``H x W x C`` array."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageError(f"expected an H x W x C image with C in (1, 3), got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ImageError("image contains non-finite pixels")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ImageError("pixels must lie in [0, 1]")
    if downsample_factor is not None:
        h, w = img.shape[:2]
        if h % downsample_factor or w % downsample_factor:
            raise ImageError(f"image size {h}x{w} is not divisible by {downsample_factor}")
    return img


def to_tensor(image) -> torch.Tensor:
    """``H x W x C`` (or a stack ``N x H x W x C``) -> ``N x C x H x W`` float64 tensor."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_tensor` for a single image."""
    arr = tensor.detach().to(torch.float64).cpu().numpy()
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ImageError("to_image expects a single image")
        arr = arr[0]
    return arr.transpose(1, 2, 0).copy()


def quantize(image) -> np.ndarray:
    """Round to the 8-bit grid, as a PNG save/load would."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def save_png(image, path) -> None:
    img = check_image(image)
    data = np.round(img * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        Image.fromarray(data[..., 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        data = np.asarray(im, dtype=np.float64) / 255.0
    if data.ndim == 2:
        data = data[..., None]
    return data


def load_dataset(directory, limit: int | None = None) -> tuple[list[str], np.ndarray]:
    """Load every ``*.png`` in ``directory`` (sorted by name) into an ``N x H x W x C`` stack."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageError(f"dataset directory {directory} does not exist")
    files = sorted(directory.glob("*.png"))
    if limit is not None:
        files = files[:limit]
    if not files:
        raise ImageError(f"no PNG images in {directory}")
    images = [load_png(f) for f in files]
    shape = images[0].shape
    for f, img in zip(files, images):
        if img.shape != shape:
            raise ImageError(f"{f.name} has shape {img.shape}, expected {shape}")
    return [f.name for f in files], np.stack(images)


def write_dataset(directory, images, prefix: str = "img") -> list[str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    width = max(5, len(str(len(images))))
    for i, img in enumerate(images):
        name = f"{prefix}_{i:0{width}d}.png"
        save_png(img, directory / name)
        names.append(name)
    return names


def _draw_shape(canvas, rng, kind):
    h, w, _ = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    color = rng.uniform(0, 1, 3)
    cy, cx = rng.uniform(0.2, 0.8, 2) * (h, w)
    r = rng.uniform(0.12, 0.3) * min(h, w)
    if kind == 0:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    elif kind == 1:
        ry, rx = r * rng.uniform(0.5, 1.2, 2)
        mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    else:
        angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
        py, px = cy + r * np.sin(angles), cx + r * np.cos(angles)
        mask = np.ones((h, w), bool)
        for k in range(3):
            ay, ax, by, bx = py[k], px[k], py[(k + 1) % 3], px[(k + 1) % 3]
            oy, ox = py[(k + 2) % 3], px[(k + 2) % 3]
            side = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
            ref = (bx - ax) * (oy - ay) - (by - ay) * (ox - ax)
            mask &= side * ref >= 0
    canvas[mask] = color


def make_shapes(n: int, size: int = 32, seed: int = 3407) -> np.ndarray:
    """Deterministic corpus of gradient backgrounds with 1-3 flat-colored shapes.

    Pixels are already on the 8-bit grid, so PNG round trips are exact.
    """
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size, 3))
    t = np.linspace(0.0, 1.0, size)
    for i in range(n):
        c0, c1 = rng.uniform(0, 1, (2, 3))
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * t[None, :] + np.sin(theta) * t[:, None]
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
        canvas = c0 + ramp[..., None] * (c1 - c0)
        for _ in range(rng.integers(1, 4)):
            _draw_shape(canvas, rng, int(rng.integers(0, 3)))
        canvas += rng.normal(0, 0.02, canvas.shape)
        out[i] = canvas
    return quantize(out)
