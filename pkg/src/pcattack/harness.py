"""End-to-end campaigns: training, protection, evaluation, ablations, loss surfaces, timing.

Every command writes plain files (PNG, CSV, JSON) under the run's output
directory. Manifests are rewritten atomically after each image, so an
interrupted ``protect`` resumes where it stopped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import platform
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attack import AttackError, AttackFailure, attack_batch, pca_attack
from .config import ConfigError, RunConfig
from .defenses import apply_defense
from .diagnostics import classify_collapse, posterior_stats, trajectory_summary
from .images import ImageError, load_dataset, make_shapes, quantize, save_png, write_dataset
from .metrics import METRICS, MetricError, metric_report
from .posterior import PosteriorError, collapse_loss, loss_surface_grid
from .vae import CheckpointError, build_vae, encode, load_model, reconstruct, save_model, train_toy_vae

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
QUANT_TOL = 1 / 255

__all__ = [
    "ProtectOutcome",
    "cmd_make_dataset",
    "cmd_train_vae",
    "cmd_protect",
    "cmd_evaluate",
    "cmd_ablate",
    "cmd_plot_loss_surface",
    "read_loss_surface",
    "cmd_benchmark",
]


def _versions() -> dict:
    return {
        "pcattack": __version__,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, data) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")
    os.replace(tmp, path)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _require_dir(path, what) -> Path:
    if not path:
        raise ConfigError(f"{what} path is required")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} directory {p} does not exist")
    return p


def _require_file(path, what) -> Path:
    if not path:
        raise ConfigError(f"{what} path is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _load_images(cfg: RunConfig, limit=None):
    directory = _require_dir(cfg.dataset, "dataset")
    try:
        names, images = load_dataset(directory, limit if limit is not None else cfg.limit)
    except ImageError as exc:
        raise ConfigError(str(exc)) from None
    if images.shape[1:3] != (cfg.image_size, cfg.image_size):
        raise ConfigError(f"dataset images are {images.shape[1]}x{images.shape[2]}, config says {cfg.image_size}")
    return names, images


def _load_vae(path):
    _require_file(path, "checkpoint")
    try:
        return load_model(path)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from None


def cmd_make_dataset(output_dir, count: int = 5000, size: int = 32, seed: int = 3407) -> list[str]:
    """Write the bundled synthetic-shapes corpus as PNGs."""
    return write_dataset(output_dir, make_shapes(count, size, seed))


def cmd_train_vae(cfg: RunConfig) -> Path:
    """Train on ``cfg.dataset``; writes the checkpoint and ``training_curve.csv``."""
    names, images = _load_images(cfg)
    if not cfg.checkpoint:
        raise ConfigError("checkpoint path is required")
    train_cfg = cfg.train_config()
    vae = train_toy_vae(images, train_cfg)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_model(vae, ckpt)
    _write_csv(out / "training_curve.csv", ["epoch", "mean_loss"], [(i + 1, v) for i, v in enumerate(vae.history)])
    _write_json(
        out / "train_manifest.json",
        {
            "manifest_version": MANIFEST_VERSION,
            "command": "train-vae",
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "images": len(names),
            "checkpoint_sha256": _sha256(ckpt),
            "history": vae.history,
            "versions": _versions(),
        },
    )
    return ckpt


@dataclass
class ProtectOutcome:
    manifest_path: Path
    completed: int
    skipped: int
    failed: list

    @property
    def exit_code(self) -> int:
        return 2 if self.failed else 0


def _new_manifest(cfg: RunConfig, ckpt_sha: str) -> dict:
    return {
        "manifest_version": MANIFEST_VERSION,
        "command": "protect",
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "checkpoint_sha256": ckpt_sha,
        "seed": cfg.seed,
        "versions": _versions(),
        "items": {},
        "failures": {},
    }


def cmd_protect(cfg: RunConfig) -> ProtectOutcome:
    """Attack every dataset image and save 8-bit adversarial PNGs plus a manifest."""
    names, images = _load_images(cfg)
    vae = _load_vae(cfg.checkpoint)
    encoder = vae.encoder
    attack_cfg = cfg.attack_config()
    ckpt_sha = _sha256(cfg.checkpoint)

    out = Path(cfg.output_dir)
    adv_dir = out / "adversarial"
    adv_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    manifest = None
    if manifest_path.exists():
        try:
            old = json.loads(manifest_path.read_text())
            if old.get("config_digest") == cfg.digest() and old.get("checkpoint_sha256") == ckpt_sha:
                manifest = old
                manifest["failures"] = {}
        except json.JSONDecodeError:
            logger.warning("ignoring unreadable manifest %s", manifest_path)
    if manifest is None:
        manifest = _new_manifest(cfg, ckpt_sha)

    completed = skipped = 0
    for i, (name, image) in enumerate(zip(names, images)):
        png = adv_dir / name
        done = manifest["items"].get(name)
        if done is not None and png.exists() and _sha256(png) == done["png_sha256"]:
            skipped += 1
            continue
        try:
            result = pca_attack(image, encoder, replace(attack_cfg, seed=cfg.seed + i))
        except (AttackError, ValueError) as exc:
            logger.error("%s: %s", name, exc)
            manifest["failures"][name] = {"index": i, "step": getattr(exc, "step", None), "error": str(exc)}
            _write_json(manifest_path, manifest)
            continue
        adv_q = quantize(result.adversarial)
        save_png(adv_q, png)
        linf_post = float(np.abs(adv_q - image).max())
        before = posterior_stats(result.posterior_before)
        after = posterior_stats(encode(encoder, adv_q))
        v = attack_cfg.variance_target
        manifest["items"][name] = {
            "index": i,
            "seed": cfg.seed + i,
            "linf": result.linf,
            "linf_quantized": linf_post,
            "audit_ok": bool(result.linf <= attack_cfg.epsilon + 1e-6 and linf_post <= attack_cfg.epsilon + QUANT_TOL + 1e-9),
            "loss_trace": result.loss_trace,
            "trajectory": trajectory_summary(result).to_dict(),
            "stats_before": before.to_dict(),
            "stats_after": after.to_dict(),
            "stats_after_unquantized": posterior_stats(result.posterior_after).to_dict(),
            "collapse_loss_before": collapse_loss(result.posterior_before, v),
            "collapse_loss_after": collapse_loss(encode(encoder, adv_q), v),
            "verdict": classify_collapse(before, after).to_dict(),
            "elapsed": result.elapsed,
            "png_sha256": _sha256(png),
        }
        completed += 1
        _write_json(manifest_path, manifest)

    items = [manifest["items"][n] | {"name": n} for n in names if n in manifest["items"]]
    _write_csv(
        out / "protect_summary.csv",
        ["name", "linf", "linf_quantized", "loss_first", "loss_last", "mu_ratio", "sigma_ratio", "verdict"],
        [
            (
                it["name"],
                it["linf"],
                it["linf_quantized"],
                it["loss_trace"][0],
                it["loss_trace"][-1],
                it["verdict"]["mu_ratio"],
                it["verdict"]["sigma_ratio"],
                it["verdict"]["kind"],
            )
            for it in items
        ],
    )
    _write_json(manifest_path, manifest)
    failed = sorted(manifest["failures"])
    return ProtectOutcome(manifest_path, completed, skipped, failed)


def cmd_evaluate(cfg: RunConfig) -> dict:
    """Compare originals with their reconstructions before and after protection.

    For each defense (applied before encoding) and image, records direct
    IQA(x, x_adv), IQA(x, recon(x)), IQA(x, recon(x_adv)) and the collapse
    loss of both encodings. Writes ``evaluation.csv`` and ``evaluation.json``.
    """
    names, originals = _load_images(cfg)
    protected_dir = _require_dir(cfg.protected or Path(cfg.output_dir) / "adversarial", "protected")
    try:
        prot_names, protected = load_dataset(protected_dir)
    except ImageError as exc:
        raise ConfigError(str(exc)) from None
    lookup = dict(zip(prot_names, protected))
    missing = [n for n in names if n not in lookup]
    if missing or (cfg.limit is None and set(prot_names) != set(names)):
        extra = sorted(set(prot_names) - set(names))
        raise ConfigError(f"file sets differ: missing {missing[:5]}, unexpected {extra[:5]}")
    adversarial = [lookup[n] for n in names]
    vae = _load_vae(cfg.checkpoint)
    enc, dec = vae
    for m in cfg.metrics:
        if m not in METRICS:
            try:
                metric_report([(originals[0], originals[0])], [m])
            except MetricError as exc:
                raise ConfigError(str(exc)) from None
    v = cfg.attack_config().variance_target

    header = ["name", "defense"]
    kinds = ("direct", "recon_clean", "recon_adv")
    header += [f"{k}_{m}" for k in kinds for m in cfg.metrics]
    header += ["collapse_clean", "collapse_adv", "mean_sq_mu_clean", "mean_sq_mu_adv", "mean_sigma_sq_clean", "mean_sigma_sq_adv"]
    rows = []
    aggregates = {}
    for spec in cfg.defenses:
        defended_x = [apply_defense(x, spec) for x in originals]
        defended_a = [apply_defense(a, spec) for a in adversarial]
        rec_x = [reconstruct(enc, dec, x, cfg.recon_mode, cfg.seed + i) for i, x in enumerate(defended_x)]
        rec_a = [reconstruct(enc, dec, a, cfg.recon_mode, cfg.seed + i) for i, a in enumerate(defended_a)]
        reports = {
            "direct": metric_report(list(zip(originals, adversarial)), cfg.metrics, names),
            "recon_clean": metric_report(list(zip(originals, rec_x)), cfg.metrics, names),
            "recon_adv": metric_report(list(zip(originals, rec_a)), cfg.metrics, names),
        }
        post_x = [encode(enc, x) for x in defended_x]
        post_a = [encode(enc, a) for a in defended_a]
        extra = {
            "collapse_clean": [collapse_loss(p, v) for p in post_x],
            "collapse_adv": [collapse_loss(p, v) for p in post_a],
            "mean_sq_mu_clean": [posterior_stats(p).mean_sq_mu for p in post_x],
            "mean_sq_mu_adv": [posterior_stats(p).mean_sq_mu for p in post_a],
            "mean_sigma_sq_clean": [posterior_stats(p).mean_sigma_sq for p in post_x],
            "mean_sigma_sq_adv": [posterior_stats(p).mean_sigma_sq for p in post_a],
        }
        for i, name in enumerate(names):
            row = [name, spec.label]
            row += [reports[k].rows[i][m] for k in kinds for m in cfg.metrics]
            row += [extra[c][i] for c in header[len(header) - 6 :]]
            rows.append(row)
        agg = {f"{k}_{m}": stats for k in kinds for m, stats in reports[k].aggregates().items()}
        for c, vals in extra.items():
            agg[c] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "count": len(vals)}
        aggregates[spec.label] = agg

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "evaluation.csv", header, rows)
    summary = {
        "manifest_version": MANIFEST_VERSION,
        "command": "evaluate",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "count": len(names),
        "aggregates": aggregates,
    }
    _write_json(out / "evaluation.json", summary)
    return summary


ABLATION_AXES = ("v", "alpha", "steps", "epsilon", "surrogate")


def _campaign_stats(results, encoder, v):
    ok = [r for r in results if not isinstance(r, AttackFailure)]
    before = [posterior_stats(r.posterior_before) for r in ok]
    after = [posterior_stats(r.posterior_after) for r in ok]
    verdicts = [classify_collapse(b, a).kind for b, a in zip(before, after)]
    return {
        "n_ok": len(ok),
        "n_failed": len(results) - len(ok),
        "collapse_before": float(np.mean([collapse_loss(r.posterior_before, v) for r in ok])),
        "collapse_after": float(np.mean([collapse_loss(r.posterior_after, v) for r in ok])),
        "mean_sq_mu_after": float(np.mean([a.mean_sq_mu for a in after])),
        "mean_sigma_sq_after": float(np.mean([a.mean_sigma_sq for a in after])),
        "kl_standard_after": float(np.mean([a.kl_to_standard for a in after])),
        "mu_ratio": float(np.mean([a.mean_sq_mu / b.mean_sq_mu for a, b in zip(after, before)])),
        "sigma_ratio": float(np.mean([a.mean_sigma_sq / b.mean_sigma_sq for a, b in zip(after, before)])),
        "concentration_fraction": float(np.mean([k == "concentration" for k in verdicts])),
    }


def _parse_axis_values(axis, values):
    if axis == "surrogate":
        return [str(v) for v in values]
    if axis == "steps":
        return [int(v) for v in values]
    return [float(v) for v in values]


def cmd_ablate(cfg: RunConfig, axis: str, values) -> list[dict]:
    """One campaign per axis value over the first ``cfg.limit`` (default 20) images."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("ablation needs at least one value")
    try:
        values = _parse_axis_values(axis, values)
    except ValueError as exc:
        raise ConfigError(f"bad {axis} value: {exc}") from None
    names, images = _load_images(cfg, cfg.limit or 20)
    base = cfg.attack_config()
    rows = []
    if axis == "surrogate":
        models = [_load_vae(p) for p in values]
        for si, source in enumerate(models):
            results = attack_batch(images, source.encoder, base)
            ok = [r for r in results if not isinstance(r, AttackFailure)]
            reductions = []
            for target in models:
                red = []
                for r in ok:
                    b = posterior_stats(encode(target.encoder, r.adversarial - r.delta))
                    a = posterior_stats(encode(target.encoder, r.adversarial))
                    red.append(1.0 - a.mean_sq_mu / b.mean_sq_mu)
                reductions.append(float(np.mean(red)))
            for ti, red in enumerate(reductions):
                rows.append(
                    {
                        "axis": axis,
                        "surrogate": values[si],
                        "target": values[ti],
                        "mu_reduction": red,
                        "transfer_ratio": red / reductions[si] if reductions[si] else math.nan,
                    }
                )
    else:
        vae = _load_vae(cfg.checkpoint)
        for value in values:
            if axis == "v":
                ac = replace(base, variance_target=value)
            elif axis == "alpha":
                ac = replace(base, alpha=value / 255)
            elif axis == "epsilon":
                ac = replace(base, epsilon=value / 255)
            else:
                ac = replace(base, steps=value)
            results = attack_batch(images, vae.encoder, ac)
            rows.append({"axis": axis, "value": value, **_campaign_stats(results, vae.encoder, ac.variance_target)})

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = list(rows[0])
    _write_csv(out / f"ablation_{axis}.csv", header, [[r[h] for h in header] for r in rows])
    _write_json(
        out / f"ablation_{axis}.json",
        {
            "manifest_version": MANIFEST_VERSION,
            "command": "ablate",
            "axis": axis,
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "rows": rows,
        },
    )
    return rows


def cmd_plot_loss_surface(
    criterion: str,
    v: float,
    mu_range=(-3.0, 3.0),
    sigma2_range=(0.1, 4.0),
    resolution: int = 61,
    output_csv="loss_surface.csv",
    image_path=None,
):
    """Write ``mu, sigma2, loss`` rows for the criterion grid; optionally render a heat map."""
    try:
        mus, s2s, grid = loss_surface_grid(criterion, mu_range, sigma2_range, resolution, v)
    except PosteriorError as exc:
        raise ConfigError(str(exc)) from None
    Path(output_csv).parent.mkdir(parents=True, exist_ok=True)
    _write_csv(
        output_csv,
        ["mu", "sigma2", "loss"],
        [(float(m), float(s), float(grid[i, j])) for i, m in enumerate(mus) for j, s in enumerate(s2s)],
    )
    if image_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.pcolormesh(s2s, mus, np.log1p(grid), shading="auto")
        ax.set_xlabel("sigma^2")
        ax.set_ylabel("mu")
        ax.set_title(f"{criterion}, v={v:g} (log1p scale)")
        fig.colorbar(im, ax=ax)
        fig.savefig(image_path, dpi=120, bbox_inches="tight")
        plt.close(fig)
    return mus, s2s, grid


def read_loss_surface(path):
    """Inverse of the CSV written by :func:`cmd_plot_loss_surface`."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    mus = sorted({float(r["mu"]) for r in rows})
    s2s = sorted({float(r["sigma2"]) for r in rows})
    grid = np.empty((len(mus), len(s2s)))
    mi = {m: i for i, m in enumerate(mus)}
    si = {s: j for j, s in enumerate(s2s)}
    for r in rows:
        grid[mi[float(r["mu"])], si[float(r["sigma2"])]] = float(r["loss"])
    return np.array(mus), np.array(s2s), grid


def cmd_benchmark(cfg: RunConfig, sizes) -> list[dict]:
    """Wall-clock of one full attack per image size.

    Uses the configured checkpoint when its resolution matches, otherwise a
    seeded untrained model of the same architecture (timing does not depend
    on the weights).
    """
    vae = _load_vae(cfg.checkpoint) if cfg.checkpoint else None
    ac = cfg.attack_config()
    rows = []
    for size in sizes:
        size = int(size)
        if size % 4:
            raise ConfigError(f"size {size} is not a multiple of 4")
        model = vae if vae is not None and vae.decoder.image_size == size else build_vae(image_size=size, seed=cfg.seed)
        image = make_shapes(1, size, cfg.seed)[0]
        result = pca_attack(image, model.encoder, ac)
        rows.append(
            {
                "size": size,
                "steps": ac.steps,
                "latent_dim": model.encoder.latent_dim(size, size),
                "seconds": result.elapsed,
                "trained": model is vae,
            }
        )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = list(rows[0])
    _write_csv(out / "benchmark.csv", header, [[r[h] for h in header] for r in rows])
    _write_json(
        out / "benchmark.json",
        {
            "manifest_version": MANIFEST_VERSION,
            "command": "benchmark",
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "rows": rows,
            "versions": _versions(),
        },
    )
    return rows
