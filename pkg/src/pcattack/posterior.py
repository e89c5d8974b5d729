"""Diagonal Gaussian posteriors and the divergence criteria used to collapse them.

Every criterion compares an encoder posterior ``q = N(mean, diag(exp(log_variance)))``
against the isotropic target ``N(0, v I)``. The functions operate on torch
tensors so they can sit inside an autograd graph; the public wrappers taking
:class:`PosteriorParams` validate their input and return plain floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

__all__ = [
    "PosteriorError",
    "PosteriorParams",
    "TargetPrior",
    "CRITERIA",
    "kl_to_isotropic",
    "collapse_loss",
    "forward_kl_to_isotropic",
    "mse_criterion",
    "criterion_value",
    "loss_surface_grid",
]


class PosteriorError(ValueError):
    """Raised for malformed posteriors, priors or grid ranges."""


def _as_vector(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        t = values
    else:
        t = torch.as_tensor(np.asarray(values, dtype=np.float64))
    return t.reshape(-1)


@dataclass(frozen=True)
class PosteriorParams:
    """Per-dimension mean and log-variance of a diagonal Gaussian.

    Inputs are flattened, so a spatial ``(c, h, w)`` latent is accepted as-is.
    """

    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        mean = _as_vector(self.mean)
        log_variance = _as_vector(self.log_variance)
        if mean.numel() < 1:
            raise PosteriorError("posterior must have at least one dimension")
        if mean.shape != log_variance.shape:
            raise PosteriorError(
                f"mean has {mean.numel()} entries but log_variance has {log_variance.numel()}"
            )
        if not (torch.isfinite(mean).all() and torch.isfinite(log_variance).all()):
            raise PosteriorError("posterior parameters must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_variance", log_variance)

    @classmethod
    def from_variance(cls, mean, variance) -> "PosteriorParams":
        variance = _as_vector(variance)
        if not (variance > 0).all():
            raise PosteriorError("variance must be strictly positive")
        return cls(mean, torch.log(variance))

    @property
    def dim(self) -> int:
        return self.mean.numel()

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_variance)

    def detach(self) -> "PosteriorParams":
        return PosteriorParams(self.mean.detach().clone(), self.log_variance.detach().clone())

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.detach().double().tolist(),
            "log_variance": self.log_variance.detach().double().tolist(),
        }


@dataclass(frozen=True)
class TargetPrior:
    """Isotropic zero-mean Gaussian target ``N(0, variance_scale * I)``."""

    variance_scale: float = 1.0

    def __post_init__(self):
        v = float(self.variance_scale)
        if not (math.isfinite(v) and v > 0):
            raise PosteriorError(f"target variance must be positive and finite, got {v!r}")
        object.__setattr__(self, "variance_scale", v)


def _scale(prior) -> float:
    if isinstance(prior, TargetPrior):
        return prior.variance_scale
    return TargetPrior(prior).variance_scale


# Elementwise kernels. Each returns per-dimension terms; callers sum them.
# log_variance is used directly wherever ln(sigma^2) appears.


def _reverse_kl_terms(mean, log_variance, v: float):
    return 0.5 * ((torch.exp(log_variance) + mean**2) / v - 1.0 + math.log(v) - log_variance)


def _collapse_terms(mean, log_variance, v: float):
    return 0.5 * (-log_variance - 1.0 + (mean**2 + torch.exp(log_variance)) / v)


def _forward_kl_terms(mean, log_variance, v: float):
    return 0.5 * (log_variance - math.log(v) - 1.0 + (v + mean**2) * torch.exp(-log_variance))


def _mse_terms(mean, log_variance, v: float):
    return mean**2 + (torch.exp(log_variance) - v) ** 2


_TERMS: dict[str, Callable] = {
    "reverse_kl": _reverse_kl_terms,
    "collapse": _collapse_terms,
    "forward_kl": _forward_kl_terms,
    "mse": _mse_terms,
}

#: Differentiable criteria on raw tensors: ``fn(mean, log_variance, v) -> 0-d tensor``.
CRITERIA: dict[str, Callable[[torch.Tensor, torch.Tensor, float], torch.Tensor]] = {
    name: (lambda terms: lambda m, lv, v: terms(m, lv, v).sum())(terms)
    for name, terms in _TERMS.items()
}


def criterion_value(name: str, post: PosteriorParams, prior) -> float:
    try:
        fn = CRITERIA[name]
    except KeyError:
        raise PosteriorError(f"unknown criterion {name!r}; choose from {sorted(CRITERIA)}") from None
    return float(fn(post.mean, post.log_variance, _scale(prior)))


def kl_to_isotropic(post: PosteriorParams, prior) -> float:
    """Exact ``KL(q || N(0, vI))`` for a diagonal posterior ``q``.

    ``prior`` may be a :class:`TargetPrior` or a bare positive float ``v``.
    """
    return criterion_value("reverse_kl", post, prior)


def collapse_loss(post: PosteriorParams, prior) -> float:
    """Reverse KL with the constant ``(d/2) ln v`` removed.

    This is the objective actually optimized by the attack. For tiny ``v`` it
    is dominated by ``(mean^2 + variance) / v``.
    """
    return criterion_value("collapse", post, prior)


def forward_kl_to_isotropic(post: PosteriorParams, prior) -> float:
    """``KL(N(0, vI) || q)``, the mass-covering direction."""
    return criterion_value("forward_kl", post, prior)


def mse_criterion(post: PosteriorParams, prior) -> float:
    """Squared distance from ``(mean, variance)`` to ``(0, v)``, summed over dimensions."""
    return criterion_value("mse", post, prior)


def loss_surface_grid(
    criterion: str,
    mu_range: tuple[float, float],
    sigma2_range: tuple[float, float],
    resolution: int,
    v: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate a one-dimensional criterion on a regular (mean, variance) grid.

    Returns ``(mu_values, sigma2_values, grid)`` with
    ``grid[i, j] = criterion(mu_values[i], sigma2_values[j])``.
    """
    if criterion not in _TERMS:
        raise PosteriorError(f"unknown criterion {criterion!r}; choose from {sorted(_TERMS)}")
    if int(resolution) < 2:
        raise PosteriorError("resolution must be at least 2")
    lo, hi = sigma2_range
    if not (lo > 0 and hi > 0):
        raise PosteriorError("variance range must be strictly positive")
    v = _scale(v)
    mus = np.linspace(mu_range[0], mu_range[1], int(resolution))
    sigma2s = np.linspace(lo, hi, int(resolution))
    m = torch.as_tensor(mus)[:, None]
    lv = torch.log(torch.as_tensor(sigma2s))[None, :]
    grid = _TERMS[criterion](m, lv, v).numpy()
    return mus, sigma2s, grid
