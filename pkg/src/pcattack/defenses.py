"""Purification transforms a protected image may go through before encoding.

``gaussian_blur`` is implemented in torch so the same operator can be placed
inside the attack's gradient path; the numpy entry points wrap it.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .images import check_image, to_image, to_tensor

__all__ = [
    "DefenseError",
    "DefenseSpec",
    "gaussian_kernel",
    "blur_tensor",
    "gaussian_blur",
    "jpeg_compress",
    "filter_clean",
    "apply_defense",
    "differentiable_transform",
]

KINDS = ("identity", "gaussian_blur", "jpeg", "filter_clean")


class DefenseError(ValueError):
    pass


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps, centered."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise DefenseError(f"kernel size must be a positive odd integer, got {kernel_size}")
    if sigma <= 0:
        raise DefenseError("sigma must be positive")
    r = kernel_size // 2
    taps = np.exp(-(np.arange(-r, r + 1) ** 2) / (2.0 * sigma**2))
    return taps / taps.sum()


def blur_tensor(x: torch.Tensor, kernel_size: int = 3, sigma: float = 0.8) -> torch.Tensor:
    """Separable Gaussian blur of an ``N x C x H x W`` tensor with reflect padding."""
    taps = torch.as_tensor(gaussian_kernel(kernel_size, sigma), dtype=x.dtype)
    r = kernel_size // 2
    c = x.shape[1]
    x = F.pad(x, (r, r, r, r), mode="reflect")
    x = F.conv2d(x, taps.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, taps.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def gaussian_blur(image, kernel_size: int = 3, sigma: float = 0.8) -> np.ndarray:
    img = check_image(image)
    out = to_image(blur_tensor(to_tensor(img), kernel_size, sigma))
    return np.clip(out, 0.0, 1.0)


def jpeg_compress(image, quality: int = 75) -> np.ndarray:
    """In-memory JPEG encode/decode at ``quality`` (1-100)."""
    if not (isinstance(quality, (int, np.integer)) and 1 <= quality <= 100):
        raise DefenseError(f"JPEG quality must be an integer in [1, 100], got {quality!r}")
    img = check_image(image)
    data = np.round(img * 255.0).astype(np.uint8)
    pil = Image.fromarray(data[..., 0], mode="L") if data.shape[2] == 1 else Image.fromarray(data, mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as decoded:
        out = np.asarray(decoded, dtype=np.float64) / 255.0
    return out.reshape(img.shape)


def _bilateral(img: np.ndarray, radius: int, sigma_space: float, sigma_range: float) -> np.ndarray:
    h, w, _ = img.shape
    padded = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="reflect")
    num = np.zeros_like(img)
    den = np.zeros(img.shape[:2])
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            color = ((shifted - img) ** 2).sum(axis=2)
            wgt = math.exp(-(dy * dy + dx * dx) / (2 * sigma_space**2)) * np.exp(-color / (2 * sigma_range**2))
            num += wgt[..., None] * shifted
            den += wgt
    return num / den[..., None]


def filter_clean(
    image,
    iterations: int = 4,
    sigma_space: float = 1.0,
    sigma_range: float = 0.1,
    threshold: float = 8 / 255,
) -> np.ndarray:
    """Filter-based perturbation cleaner.

    Each iteration splits the image into a bilateral (edge-preserving) base
    layer and a residual, then soft-thresholds the residual so that only
    high-frequency detail larger than ``threshold`` survives.
    """
    if iterations < 1:
        raise DefenseError("iterations must be >= 1")
    x = check_image(image)
    for _ in range(iterations):
        base = _bilateral(x, 2, sigma_space, sigma_range)
        residual = x - base
        x = base + np.sign(residual) * np.maximum(np.abs(residual) - threshold, 0.0)
    return np.clip(x, 0.0, 1.0)


_DEFAULTS = {
    "identity": {},
    "gaussian_blur": {"kernel_size": 3, "sigma": 0.8},
    "jpeg": {"quality": 75},
    "filter_clean": {"iterations": 4},
}


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "identity"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DefenseError(f"unknown defense kind {self.kind!r}; choose from {KINDS}")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise DefenseError(f"unexpected parameters for {self.kind}: {sorted(unknown)}")
        p = self.resolved()
        if self.kind == "gaussian_blur":
            gaussian_kernel(int(p["kernel_size"]), float(p["sigma"]))
        elif self.kind == "jpeg" and not (1 <= int(p["quality"]) <= 100):
            raise DefenseError("JPEG quality must be in [1, 100]")
        elif self.kind == "filter_clean" and int(p["iterations"]) < 1:
            raise DefenseError("iterations must be >= 1")

    def resolved(self) -> dict:
        return {**_DEFAULTS[self.kind], **self.params}

    @property
    def label(self) -> str:
        if self.kind == "identity":
            return "identity"
        return self.kind + "(" + ",".join(f"{k}={v}" for k, v in sorted(self.resolved().items())) + ")"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data) -> "DefenseSpec":
        if isinstance(data, str):
            return cls(data)
        extra = set(data) - {"kind", "params"}
        if extra:
            raise DefenseError(f"unknown defense keys {sorted(extra)}")
        return cls(data.get("kind", "identity"), dict(data.get("params", {})))


def apply_defense(image, spec: DefenseSpec) -> np.ndarray:
    p = spec.resolved()
    if spec.kind == "identity":
        return check_image(image)
    if spec.kind == "gaussian_blur":
        return gaussian_blur(image, int(p["kernel_size"]), float(p["sigma"]))
    if spec.kind == "jpeg":
        return jpeg_compress(image, int(p["quality"]))
    return filter_clean(image, int(p["iterations"]))


def differentiable_transform(spec: DefenseSpec) -> Callable[[torch.Tensor], torch.Tensor]:
    """Tensor-to-tensor version of ``spec`` for use inside the attack loop."""
    if spec.kind == "identity":
        return lambda x: x
    if spec.kind == "gaussian_blur":
        p = spec.resolved()
        k, s = int(p["kernel_size"]), float(p["sigma"])
        return lambda x: blur_tensor(x, k, s)
    raise DefenseError(f"{spec.kind} has no differentiable implementation; only gaussian_blur and identity")
