"""Full-reference image quality metrics: PSNR, SSIM and ACDM.

All metrics take two ``H x W x C`` images in ``[0, 1]`` (data range 1).
Windowed metrics use a Gaussian window (sigma 1.5) with whole-sample
reflection at the borders.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .images import check_image

__all__ = [
    "MetricError",
    "MetricUnavailable",
    "psnr",
    "ssim",
    "acdm",
    "MetricReport",
    "metric_report",
    "register_metric",
    "METRICS",
    "RESERVED_METRICS",
]

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
WINDOW_SIGMA = 1.5


class MetricError(ValueError):
    pass


class MetricUnavailable(MetricError):
    """A reserved metric id with no registered implementation."""


def _pair(a, b):
    a, b = check_image(a), check_image(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _window(kernel_size: int) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise MetricError(f"kernel size must be a positive odd integer, got {kernel_size}")
    r = kernel_size // 2
    taps = np.exp(-(np.arange(-r, r + 1) ** 2) / (2 * WINDOW_SIGMA**2))
    return taps / taps.sum()


def _smooth(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = correlate1d(plane, taps, axis=0, mode="mirror")
    return correlate1d(out, taps, axis=1, mode="mirror")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b, kernel_size: int = 11) -> float:
    a, b = _pair(a, b)
    taps = _window(kernel_size)
    maps = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _smooth(x, taps), _smooth(y, taps)
        sxx = _smooth(x * x, taps) - mx * mx
        syy = _smooth(y * y, taps) - my * my
        sxy = _smooth(x * y, taps) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        maps.append(num / den)
    return float(np.mean(maps))


# Orthonormal opponent-color basis: red-green, yellow-blue, luminance.
_OPPONENT = np.array(
    [
        [1 / math.sqrt(2), -1 / math.sqrt(2), 0.0],
        [1 / math.sqrt(6), 1 / math.sqrt(6), -2 / math.sqrt(6)],
        [1 / math.sqrt(3), 1 / math.sqrt(3), 1 / math.sqrt(3)],
    ]
)


def acdm(a, b, kernel_size: int = 11) -> float:
    """Average color distance on Gaussian-smoothed images in an opponent color space."""
    a, b = _pair(a, b)
    if a.shape[2] != 3:
        raise MetricError("ACDM needs RGB images")
    taps = _window(kernel_size)
    diff = np.stack([_smooth(a[..., c] - b[..., c], taps) for c in range(3)], axis=-1)
    return float(np.linalg.norm(diff @ _OPPONENT.T, axis=-1).mean())


METRICS: dict[str, Callable] = {"psnr": psnr, "ssim": ssim, "acdm": acdm}
RESERVED_METRICS = ("fid", "lpips")


def register_metric(name: str, fn: Callable) -> None:
    """Plug in an external metric (e.g. FID or LPIPS) under ``name``."""
    METRICS[name] = fn


def _resolve(metric_ids: Iterable[str]) -> list[str]:
    ids = list(metric_ids)
    for m in ids:
        if m not in METRICS:
            if m in RESERVED_METRICS:
                raise MetricUnavailable(f"{m} is reserved but no implementation is registered")
            raise MetricError(f"unknown metric {m!r}; available: {sorted(METRICS)}")
    return ids


@dataclass
class MetricReport:
    """Per-pair metric values plus aggregates.

    ``mean`` is the plain arithmetic mean (``inf`` when any PSNR is infinite);
    ``finite_mean`` and ``n_infinite`` make that case explicit.
    """

    metrics: list[str]
    names: list[str]
    rows: list[dict[str, float]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.rows)

    def values(self, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows], dtype=np.float64)

    def aggregates(self) -> dict[str, dict]:
        out = {}
        for m in self.metrics:
            vals = self.values(m)
            finite = vals[np.isfinite(vals)]
            out[m] = {
                "mean": float(vals.mean()),
                "std": float(vals.std()) if np.isfinite(vals).all() else math.nan,
                "count": int(vals.size),
                "finite_mean": float(finite.mean()) if finite.size else math.nan,
                "n_infinite": int(vals.size - finite.size),
            }
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", *self.metrics])
            for name, row in zip(self.names, self.rows):
                w.writerow([name, *(repr(float(row[m])) for m in self.metrics)])

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            metrics = header[1:]
            names, rows = [], []
            for line in r:
                names.append(line[0])
                rows.append({m: float(v) for m, v in zip(metrics, line[1:])})
        return cls(metrics, names, rows)

    def to_json(self, path=None) -> str:
        text = json.dumps({"count": self.count, "aggregates": self.aggregates()}, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def metric_report(
    pairs: Sequence[tuple], metric_ids: Iterable[str] = ("psnr", "ssim", "acdm"), names: Sequence[str] | None = None
) -> MetricReport:
    ids = _resolve(metric_ids)
    pairs = list(pairs)
    if not pairs:
        raise MetricError("metric_report needs at least one pair")
    if names is None:
        names = [str(i) for i in range(len(pairs))]
    rows = [{m: float(METRICS[m](a, b)) for m in ids} for a, b in pairs]
    return MetricReport(ids, list(names), rows)
