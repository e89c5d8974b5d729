"""Projected sign-gradient attack that drives an encoder posterior toward ``N(0, vI)``.

``direction="minimize"`` pulls the posterior onto a tiny-variance target
(concentration collapse); ``direction="maximize"`` pushes it away from the
unit-variance target (diffusion collapse).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .defenses import DefenseSpec, differentiable_transform
from .images import check_image, to_image, to_tensor
from .posterior import CRITERIA, PosteriorParams, TargetPrior

logger = logging.getLogger(__name__)

__all__ = [
    "AttackError",
    "AttackConfig",
    "AttackResult",
    "AttackFailure",
    "project_linf",
    "clip_valid",
    "pca_attack",
    "attack_gradient",
    "attack_batch",
]

DIRECTIONS = {"minimize": -1.0, "maximize": 1.0}


class AttackError(RuntimeError):
    """Raised when the attack objective or its gradient stops being finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters. ``epsilon`` and ``alpha`` are in ``[0, 1]`` pixel units.

    ``variance_target`` defaults to ``1e-8`` when minimizing and ``1`` when
    maximizing. ``in_loop_transform`` is either a :class:`DefenseSpec` with a
    differentiable implementation or any tensor-to-tensor callable.
    """

    epsilon: float = 16 / 255
    alpha: float = 2 / 255
    steps: int = 40
    variance_target: float | None = None
    direction: str = "minimize"
    criterion: str = "reverse_kl"
    in_loop_transform: DefenseSpec | Callable | None = None
    seed: int = 3407

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and not self.alpha > 0:
            raise ValueError("alpha must be > 0 when steps > 0")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {sorted(DIRECTIONS)}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {sorted(CRITERIA)}")
        if self.variance_target is None:
            object.__setattr__(self, "variance_target", 1e-8 if self.direction == "minimize" else 1.0)
        TargetPrior(self.variance_target)
        if isinstance(self.in_loop_transform, dict):
            object.__setattr__(self, "in_loop_transform", DefenseSpec.from_dict(self.in_loop_transform))
        if isinstance(self.in_loop_transform, DefenseSpec):
            differentiable_transform(self.in_loop_transform)

    @classmethod
    def from_units(cls, epsilon: float = 16, alpha: float = 2, **kwargs) -> "AttackConfig":
        """Build from budgets given in 1/255 steps (``epsilon=16`` means ``16/255``)."""
        return cls(epsilon=epsilon / 255, alpha=alpha / 255, **kwargs)

    @property
    def sign(self) -> float:
        return DIRECTIONS[self.direction]

    def transform(self) -> Callable[[torch.Tensor], torch.Tensor] | None:
        t = self.in_loop_transform
        if t is None:
            return None
        if isinstance(t, DefenseSpec):
            return None if t.kind == "identity" else differentiable_transform(t)
        return t

    def to_dict(self) -> dict:
        t = self.in_loop_transform
        if t is not None and not isinstance(t, DefenseSpec):
            raise TypeError("only DefenseSpec in-loop transforms can be serialized")
        return {
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "steps": self.steps,
            "variance_target": self.variance_target,
            "direction": self.direction,
            "criterion": self.criterion,
            "in_loop_transform": None if t is None else t.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        known = {"epsilon", "alpha", "steps", "variance_target", "direction", "criterion", "in_loop_transform", "seed"}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown attack keys {sorted(extra)}")
        data = dict(data)
        if data.get("in_loop_transform") is not None:
            data["in_loop_transform"] = DefenseSpec.from_dict(data["in_loop_transform"])
        return cls(**data)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    delta: np.ndarray
    loss_trace: list[float]
    posterior_before: PosteriorParams
    posterior_after: PosteriorParams
    elapsed: float
    config: AttackConfig = field(repr=False)

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta).max()) if self.delta.size else 0.0


@dataclass
class AttackFailure:
    index: int
    step: int | None
    message: str


def project_linf(delta, epsilon: float):
    """Clamp every entry of ``delta`` into ``[-epsilon, epsilon]``."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if isinstance(delta, torch.Tensor):
        return delta.clamp(-epsilon, epsilon)
    return np.clip(delta, -epsilon, epsilon)


def clip_valid(image):
    if isinstance(image, torch.Tensor):
        return image.clamp(0.0, 1.0)
    return np.clip(image, 0.0, 1.0)


def _encoder_dtype(encoder) -> torch.dtype:
    params = getattr(encoder, "parameters", None)
    if params is not None:
        for p in params():
            return p.dtype
    return torch.float64


def _posterior(encoder, x) -> PosteriorParams:
    with torch.no_grad():
        mean, log_variance = encoder(x)
    return PosteriorParams(mean.reshape(-1).double(), log_variance.reshape(-1).double())


def _objective(encoder, config: AttackConfig):
    fn = CRITERIA[config.criterion]
    v = float(config.variance_target)
    transform = config.transform() or (lambda t: t)

    def objective(x):
        mean, log_variance = encoder(transform(x))
        return fn(mean, log_variance, v)

    return objective


def attack_gradient(image, encoder, config: AttackConfig = AttackConfig()) -> tuple[float, np.ndarray]:
    """Criterion value at ``image`` and its gradient (``H x W x C``), exactly as one attack step sees them."""
    img = check_image(image, getattr(encoder, "downsample_factor", None))
    x = to_tensor(img).to(_encoder_dtype(encoder)).requires_grad_(True)
    loss = _objective(encoder, config)(x)
    (grad,) = torch.autograd.grad(loss, x)
    return float(loss.detach()), to_image(grad)


def pca_attack(image, encoder, config: AttackConfig = AttackConfig()) -> AttackResult:
    """Run the posterior collapse attack on one ``H x W x C`` image.

    ``encoder`` maps an ``N x C x H x W`` tensor to ``(mean, log_variance)``.
    Each step moves the image by ``alpha`` along the sign of the gradient of
    ``sign * criterion(encoder(transform(x)), v)``, clips to ``[0, 1]`` and
    projects the accumulated perturbation back into the ``epsilon`` ball.
    """
    factor = getattr(encoder, "downsample_factor", None)
    img = check_image(image, factor)
    dtype = _encoder_dtype(encoder)
    x0 = to_tensor(img).to(dtype)
    s = config.sign
    objective = _objective(encoder, config)

    started = time.perf_counter()
    trace = []
    x = x0.clone()
    for step in range(config.steps):
        x.requires_grad_(True)
        loss = objective(x)
        if not torch.isfinite(loss):
            raise AttackError(f"objective is {float(loss.detach())}", step)
        (grad,) = torch.autograd.grad(loss, x)
        if not torch.isfinite(grad).all():
            raise AttackError("gradient is not finite", step)
        trace.append(float(loss.detach()))
        with torch.no_grad():
            x = clip_valid(x + s * config.alpha * torch.sign(grad))
            x = clip_valid(x0 + project_linf(x - x0, config.epsilon))
    with torch.no_grad():
        final = objective(x)
    if not torch.isfinite(final):
        raise AttackError(f"objective is {float(final)}", config.steps)
    trace.append(float(final))
    elapsed = time.perf_counter() - started

    x = x.detach()
    return AttackResult(
        adversarial=to_image(x),
        delta=to_image(x - x0),
        loss_trace=trace,
        posterior_before=_posterior(encoder, x0),
        posterior_after=_posterior(encoder, x),
        elapsed=elapsed,
        config=config,
    )


def attack_batch(
    images: Sequence, encoder, config: AttackConfig = AttackConfig(), seeds: Sequence[int] | None = None
) -> list[AttackResult | AttackFailure]:
    """Attack each image independently, in order.

    Image ``i`` runs with seed ``config.seed + i`` unless ``seeds`` is given.
    A failing image yields an :class:`AttackFailure` and the batch continues.
    """
    images = list(images)
    if images:
        shape = np.shape(images[0])
        if any(np.shape(im) != shape for im in images):
            raise ValueError("all images in a batch must share one shape")
    if seeds is None:
        seeds = [config.seed + i for i in range(len(images))]
    out: list[AttackResult | AttackFailure] = []
    for i, (img, seed) in enumerate(zip(images, seeds)):
        try:
            out.append(pca_attack(img, encoder, replace(config, seed=int(seed))))
        except (AttackError, ValueError) as exc:
            logger.warning("image %d failed: %s", i, exc)
            out.append(AttackFailure(i, getattr(exc, "step", None), str(exc)))
    return out
