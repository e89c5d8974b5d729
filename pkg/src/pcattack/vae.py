"""Desk-scale convolutional VAE used as the surrogate encoder.

The encoder maps an ``H x W x C`` image to a spatial diagonal Gaussian with
``latent_channels`` channels at ``1/4`` resolution, mirroring the role of the
latent-diffusion autoencoder at a size that trains on a CPU in about a minute.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .images import check_image, to_image, to_tensor
from .posterior import PosteriorParams

logger = logging.getLogger(__name__)

__all__ = [
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
    "LOGVAR_MIN",
    "LOGVAR_MAX",
    "CheckpointError",
    "Encoder",
    "Decoder",
    "ToyVAE",
    "VaeTrainConfig",
    "ElboTerms",
    "encode",
    "sample_latent",
    "decode",
    "reconstruct",
    "elbo_terms",
    "elbo_loss",
    "build_vae",
    "train_toy_vae",
    "save_model",
    "load_model",
]

CHECKPOINT_FORMAT = "pcattack-vae"
CHECKPOINT_VERSION = 1
LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


class CheckpointError(RuntimeError):
    pass


class Encoder(nn.Module):
    downsample_factor = 4

    def __init__(self, in_channels: int = 3, latent_channels: int = 4, width: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.latent_channels = latent_channels
        self.width = width
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * latent_channels, 3, padding=1),
        )

    def forward(self, x):
        """``N x C x H x W`` -> (mean, log_variance), each ``N x c_z x H/4 x W/4``."""
        h = self.net(x)
        mean, log_variance = h.chunk(2, dim=1)
        return mean, log_variance.clamp(LOGVAR_MIN, LOGVAR_MAX)

    def latent_dim(self, height: int, width: int) -> int:
        f = self.downsample_factor
        return (height // f) * (width // f) * self.latent_channels


class Decoder(nn.Module):
    def __init__(self, out_channels: int = 3, latent_channels: int = 4, width: int = 32, image_size: int = 32):
        super().__init__()
        if image_size % Encoder.downsample_factor:
            raise ValueError(f"image_size must be divisible by {Encoder.downsample_factor}")
        self.out_channels = out_channels
        self.latent_channels = latent_channels
        self.width = width
        self.image_size = image_size
        self.net = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * width, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(2 * width, 2 * width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, out_channels, 3, padding=1),
        )

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.image_size // Encoder.downsample_factor
        return (self.latent_channels, s, s)

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class ToyVAE(nn.Module):
    """Encoder/decoder pair; unpacks as ``encoder, decoder``."""

    def __init__(self, encoder: Encoder, decoder: Decoder, history: list[float] | None = None):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.history = list(history or [])

    def __iter__(self):
        return iter((self.encoder, self.decoder))

    @property
    def arch(self) -> dict:
        return {
            "channels": self.encoder.in_channels,
            "latent_channels": self.encoder.latent_channels,
            "width": self.encoder.width,
            "image_size": self.decoder.image_size,
        }


def build_vae(channels=3, latent_channels=4, width=32, image_size=32, seed=3407) -> ToyVAE:
    """Freshly initialized float64 VAE; initialization depends only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        enc = Encoder(channels, latent_channels, width)
        dec = Decoder(channels, latent_channels, width, image_size)
    vae = ToyVAE(enc, dec).double()
    vae.eval()
    return vae


def _encoder_input(model: Encoder, image) -> torch.Tensor:
    img = check_image(image, model.downsample_factor)
    if img.shape[2] != model.in_channels:
        raise ValueError(f"encoder expects {model.in_channels} channels, image has {img.shape[2]}")
    return to_tensor(img).to(next(model.parameters()).dtype)


@torch.no_grad()
def encode(model: Encoder, image) -> PosteriorParams:
    """Posterior of a single image, flattened to length ``(H/f)(W/f)c_z``."""
    mean, log_variance = model(_encoder_input(model, image))
    return PosteriorParams(mean.reshape(-1).double(), log_variance.reshape(-1).double())


def sample_latent(post: PosteriorParams, seed: int = 3407) -> torch.Tensor:
    """Reparameterized draw ``mean + exp(log_variance / 2) * eta`` with seeded ``eta``."""
    gen = torch.Generator().manual_seed(int(seed))
    eta = torch.randn(post.dim, generator=gen, dtype=torch.float64)
    return post.mean.double() + torch.exp(0.5 * post.log_variance.double()) * eta


@torch.no_grad()
def decode(model: Decoder, latent) -> np.ndarray:
    z = torch.as_tensor(latent, dtype=torch.float64).reshape(-1)
    expected = math.prod(model.latent_shape)
    if z.numel() != expected:
        raise ValueError(f"latent has {z.numel()} entries, decoder expects {expected}")
    z = z.reshape(1, *model.latent_shape).to(next(model.parameters()).dtype)
    return to_image(model(z))


def reconstruct(encoder: Encoder, decoder: Decoder, image, mode: str = "mean", seed: int = 3407) -> np.ndarray:
    post = encode(encoder, image)
    if mode == "mean":
        return decode(decoder, post.mean)
    if mode == "sample":
        return decode(decoder, sample_latent(post, seed))
    raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")


class ElboTerms(NamedTuple):
    reconstruction: float
    kl: float
    total: float


def _elbo_batch(encoder, decoder, x, beta, noise):
    mean, log_variance = encoder(x)
    z = mean + torch.exp(0.5 * log_variance) * noise
    recon = decoder(z)
    rec = ((recon - x) ** 2).flatten(1).sum(1)
    kl = 0.5 * (mean**2 + torch.exp(log_variance) - 1.0 - log_variance).flatten(1).sum(1)
    return rec, kl, rec + beta * kl


@torch.no_grad()
def elbo_terms(encoder: Encoder, decoder: Decoder, image, beta: float = 1.0, seed: int = 3407) -> ElboTerms:
    """Negative ELBO of one image: squared-error reconstruction of one posterior draw
    plus ``beta * KL(q(z|x) || N(0, I))``."""
    x = _encoder_input(encoder, image)
    gen = torch.Generator().manual_seed(int(seed))
    latent = (x.shape[0], *decoder.latent_shape)
    noise = torch.randn(latent, generator=gen, dtype=torch.float64).to(x.dtype)
    rec, kl, total = _elbo_batch(encoder, decoder, x, beta, noise)
    return ElboTerms(float(rec), float(kl), float(total))


def elbo_loss(encoder: Encoder, decoder: Decoder, image, beta: float = 1.0, seed: int = 3407) -> float:
    return elbo_terms(encoder, decoder, image, beta, seed).total


@dataclass(frozen=True)
class VaeTrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 2e-3
    beta: float = 0.005
    seed: int = 3407
    latent_channels: int = 4
    width: int = 32

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.learning_rate <= 0 or self.beta < 0:
            raise ValueError("batch_size and learning_rate must be positive, beta nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def train_toy_vae(dataset, config: VaeTrainConfig = VaeTrainConfig()) -> ToyVAE:
    """Minimize the mean negative ELBO over ``dataset`` (``N x H x W x C`` in ``[0, 1]``).

    Optimization runs in float32; the returned model is float64 and in eval
    mode. ``history`` holds the mean training loss of every epoch.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError("dataset must be a nonempty N x H x W x C stack")
    n, h, w, c = data.shape
    if h != w:
        raise ValueError(f"images must be square, got {h}x{w}")
    for img in data[:1]:
        check_image(img, Encoder.downsample_factor)
    if data.min() < 0 or data.max() > 1:
        raise ValueError("pixels must lie in [0, 1]")

    vae = build_vae(c, config.latent_channels, config.width, h, config.seed).float()
    vae.train()
    x_all = to_tensor(data).float()
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(vae.parameters(), lr=config.learning_rate)
    history = []
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, config.batch_size):
            x = x_all[order[start : start + config.batch_size]]
            noise = torch.randn((x.shape[0], *vae.decoder.latent_shape), generator=gen)
            _, _, loss = _elbo_batch(vae.encoder, vae.decoder, x, config.beta, noise)
            opt.zero_grad()
            loss.mean().backward()
            opt.step()
            total += float(loss.detach().sum())
        history.append(total / n)
        logger.info("epoch %d/%d  mean loss %.4f", epoch + 1, config.epochs, history[-1])
    vae = vae.double()
    vae.eval()
    vae.history = history
    return vae


def save_model(model: ToyVAE, path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "history": [float(v) for v in model.history],
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_model(path) -> ToyVAE:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')!r} is incompatible with {CHECKPOINT_VERSION}"
        )
    try:
        vae = build_vae(**payload["arch"])
        vae.load_state_dict(payload["state"])
    except (KeyError, TypeError, RuntimeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is malformed: {exc}") from exc
    vae.history = list(payload.get("history", []))
    vae.double().eval()
    return vae
