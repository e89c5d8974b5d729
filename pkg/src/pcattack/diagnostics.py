"""Posterior statistics, collapse classification and attack trajectory summaries."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .posterior import PosteriorParams, kl_to_isotropic

__all__ = [
    "PosteriorStats",
    "CollapseVerdict",
    "posterior_stats",
    "classify_collapse",
    "TrajectorySummary",
    "trajectory_summary",
]


@dataclass(frozen=True)
class PosteriorStats:
    """Per-dimension averages: mean of mu^2, mean of sigma^2 and KL to N(0, I) divided by d."""

    mean_sq_mu: float
    mean_sigma_sq: float
    kl_to_standard: float

    def to_dict(self) -> dict:
        return asdict(self)


def posterior_stats(post: PosteriorParams) -> PosteriorStats:
    mean = post.mean.detach().double()
    return PosteriorStats(
        mean_sq_mu=float((mean**2).mean()),
        mean_sigma_sq=float(post.variance.detach().double().mean()),
        kl_to_standard=kl_to_isotropic(post, 1.0) / post.dim,
    )


@dataclass(frozen=True)
class CollapseVerdict:
    kind: str  # "concentration", "diffusion" or "none"
    mu_ratio: float
    sigma_ratio: float
    shrink: float
    grow: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(after: float, before: float) -> float:
    if before == 0.0:
        return 1.0 if after == 0.0 else np.inf
    return after / before


def classify_collapse(
    before: PosteriorStats, after: PosteriorStats, shrink: float = 0.1, grow: float = 10.0
) -> CollapseVerdict:
    """Concentration if both the mean energy and the variance fell below ``shrink``
    times their clean values; otherwise diffusion if the variance grew past
    ``grow`` times. The thresholds are conventions, not limits."""
    mu_ratio = _ratio(after.mean_sq_mu, before.mean_sq_mu)
    sigma_ratio = _ratio(after.mean_sigma_sq, before.mean_sigma_sq)
    if mu_ratio < shrink and sigma_ratio < shrink:
        kind = "concentration"
    elif sigma_ratio > grow:
        kind = "diffusion"
    else:
        kind = "none"
    return CollapseVerdict(kind, mu_ratio, sigma_ratio, shrink, grow)


@dataclass(frozen=True)
class TrajectorySummary:
    monotonic_fraction: float
    first: float
    last: float
    slope: float
    steps: int

    def to_dict(self) -> dict:
        return asdict(self)


def trajectory_summary(result_or_trace, direction: str | None = None) -> TrajectorySummary:
    """Summarize a loss trace (or an ``AttackResult``).

    ``monotonic_fraction`` is the share of steps that moved in the attack
    direction (strictly); ``slope`` is the least-squares slope per step.
    """
    if hasattr(result_or_trace, "loss_trace"):
        trace = result_or_trace.loss_trace
        direction = direction or result_or_trace.config.direction
    else:
        trace = result_or_trace
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size < 1:
        raise ValueError("loss trace is empty")
    direction = direction or "minimize"
    if trace.size == 1:
        return TrajectorySummary(1.0, float(trace[0]), float(trace[0]), 0.0, 0)
    steps = np.diff(trace)
    good = steps < 0 if direction == "minimize" else steps > 0
    slope = float(np.polyfit(np.arange(trace.size), trace, 1)[0])
    return TrajectorySummary(float(good.mean()), float(trace[0]), float(trace[-1]), slope, int(steps.size))
