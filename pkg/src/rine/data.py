"""Dataset loading, train/eval pixel transforms, the evaluation-time
perturbation harness, and a synthetic toy corpus generator.

Pixel policy: images are float32 (3, H, W) in [0, 1].  The only pixel
operations in this module are crop, flip, Gaussian blur, JPEG re-encode,
and additive noise -- never resampling/resizing, which is known to wipe
out the low-level traces the detector feeds on.  Every randomized
transform draws from an Rng derived from (seed, sample id), so results do
not depend on iteration or prefetch order.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .kernels import Rng

logger = logging.getLogger(__name__)

Array = np.ndarray

REAL_DIR, FAKE_DIR = "0_real", "1_fake"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

PERTURB_KINDS = ("blur", "crop", "compress", "noise", "combined")


@dataclass
class ImageSample:
    pixels: Array               # (3, H, W) float32 in [0, 1]
    label: int                  # 0 real, 1 fake
    id: str                     # stable identifier (relative path)


@dataclass(frozen=True)
class PerturbConfig:
    """Evaluation-perturbation parameters; ranges are inclusive."""

    apply_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.0, 3.0)
    jpeg_quality: tuple[int, int] = (30, 100)
    crop_fraction: float = 0.875
    noise_sigma: tuple[float, float] = (0.0, 0.05)


# ---------------------------------------------------------------------------
# pixel primitives


def center_crop(pixels: Array, side: int) -> Array:
    _, h, w = pixels.shape
    if h < side or w < side:
        raise ValueError(f"center_crop: image {h}x{w} smaller than {side}")
    top, left = (h - side) // 2, (w - side) // 2
    return pixels[:, top : top + side, left : left + side].copy()


def random_crop(pixels: Array, out_h: int, out_w: int, rng) -> Array:
    _, h, w = pixels.shape
    if h < out_h or w < out_w:
        raise ValueError(f"random_crop: image {h}x{w} smaller than {out_h}x{out_w}")
    top = int(rng.integers(0, h - out_h))
    left = int(rng.integers(0, w - out_w))
    return pixels[:, top : top + out_h, left : left + out_w].copy()


def hflip(pixels: Array) -> Array:
    return pixels[:, :, ::-1].copy()


def gaussian_blur(pixels: Array, sigma: float) -> Array:
    if sigma == 0:
        return pixels
    return gaussian_filter(pixels, sigma=(0.0, sigma, sigma), mode="reflect")


def jpeg_roundtrip(pixels: Array, quality: int) -> Array:
    """Re-encode through a baseline JPEG codec at the given quality."""
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(arr.transpose(1, 2, 0), "RGB")
    buf = io.BytesIO()
    img.save(buf, "JPEG", quality=int(quality))
    buf.seek(0)
    out = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def add_noise(pixels: Array, sigma: float, rng) -> Array:
    if sigma == 0:
        return pixels
    noisy = pixels + rng.normal(0.0, sigma, pixels.shape).astype(pixels.dtype)
    return np.clip(noisy, 0.0, 1.0)


def _decode(path: Path) -> Array:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# dataset access


def load_dataset(root, stats: dict | None = None) -> Iterator[ImageSample]:
    """Stream samples from root/{0_real,1_fake} in sorted path order.

    Undecodable files are skipped with a warning (counted in
    ``stats['skipped']`` when a dict is passed); an empty or missing class
    directory is an error.
    """
    root = Path(root)
    listing: list[tuple[Path, int]] = []
    for sub, label in ((REAL_DIR, 0), (FAKE_DIR, 1)):
        class_dir = root / sub
        files = (
            sorted(
                p for p in class_dir.iterdir()
                if p.suffix.lower() in IMAGE_SUFFIXES
            )
            if class_dir.is_dir()
            else []
        )
        if not files:
            raise ValueError(f"load_dataset: no images in {class_dir}")
        listing.extend((p, label) for p in files)

    for path, label in listing:
        try:
            pixels = _decode(path)
        except Exception as exc:
            logger.warning("load_dataset: skipping undecodable %s (%s)", path, exc)
            if stats is not None:
                stats["skipped"] = stats.get("skipped", 0) + 1
            continue
        yield ImageSample(pixels=pixels, label=label, id=str(path.relative_to(root)))


# ---------------------------------------------------------------------------
# train / eval transforms


def augment_train(sample: ImageSample, rng, crop_side: int = 224) -> ImageSample:
    """Training augmentation, in order: maybe blur, maybe JPEG, random
    crop to ``crop_side``, maybe horizontal flip."""
    px = sample.pixels
    if min(px.shape[1], px.shape[2]) < crop_side:
        raise ValueError(
            f"augment_train: image {px.shape[1]}x{px.shape[2]} smaller than "
            f"crop side {crop_side}"
        )
    if rng.random() < 0.5:
        px = gaussian_blur(px, float(rng.uniform(0.0, 3.0)))
    if rng.random() < 0.5:
        px = jpeg_roundtrip(px, int(rng.integers(30, 100)))
    px = random_crop(px, crop_side, crop_side, rng)
    if rng.random() < 0.5:
        px = hflip(px)
    return replace(sample, pixels=px)


def preprocess_eval(sample: ImageSample, crop_side: int = 224) -> ImageSample:
    """Deterministic center crop; the only eval-time pixel transform."""
    px = sample.pixels
    if min(px.shape[1], px.shape[2]) < crop_side:
        raise ValueError(
            f"preprocess_eval: image {px.shape[1]}x{px.shape[2]} smaller than "
            f"crop side {crop_side}; resizing is deliberately not offered"
        )
    return replace(sample, pixels=center_crop(px, crop_side))


def _apply_kind(px: Array, kind: str, rng, cfg: PerturbConfig) -> Array:
    if kind == "blur":
        return gaussian_blur(px, float(rng.uniform(*cfg.blur_sigma)))
    if kind == "crop":
        _, h, w = px.shape
        return random_crop(
            px, round(cfg.crop_fraction * h), round(cfg.crop_fraction * w), rng
        )
    if kind == "compress":
        return jpeg_roundtrip(px, int(rng.integers(*cfg.jpeg_quality)))
    if kind == "noise":
        return add_noise(px, float(rng.uniform(*cfg.noise_sigma)), rng)
    raise ValueError(f"perturb: unknown kind {kind!r}")


def perturb(
    sample: ImageSample, kind: str, rng, cfg: PerturbConfig = PerturbConfig()
) -> ImageSample:
    """Evaluation-time corruption: each perturbation fires with
    ``cfg.apply_prob``; ``combined`` rolls the four base kinds
    independently in the fixed order blur, crop, compress, noise."""
    if kind not in PERTURB_KINDS:
        raise ValueError(f"perturb: kind must be one of {PERTURB_KINDS}, got {kind!r}")
    px = sample.pixels
    kinds = ("blur", "crop", "compress", "noise") if kind == "combined" else (kind,)
    for k in kinds:
        if rng.random() < cfg.apply_prob:
            px = _apply_kind(px, k, rng, cfg)
    return replace(sample, pixels=px)


# ---------------------------------------------------------------------------
# synthetic toy corpus


def _toy_image(r: Rng, side: int, amplitude: float) -> Array:
    """Smoothed random color field, plus a pixel-rate checkerboard residual
    when ``amplitude`` > 0 (the stand-in for generator traces)."""
    field = r.uniform(0.0, 1.0, (3, side, side)).astype(np.float32)
    smooth = gaussian_blur(field, sigma=side / 8.0)
    lo = smooth.min(axis=(1, 2), keepdims=True)
    hi = smooth.max(axis=(1, 2), keepdims=True)
    base = 0.2 + 0.6 * (smooth - lo) / np.maximum(hi - lo, 1e-8)
    if amplitude > 0:
        ij = np.add.outer(np.arange(side), np.arange(side))
        checker = ((ij % 2) * 2 - 1).astype(np.float32)
        base = base + (amplitude / 2.0) * checker
    return np.clip(base, 0.0, 1.0)


def synth_toy_dataset(
    out_dir,
    n_per_class: int,
    side: int,
    artifact_amplitude: float,
    rng: Rng,
    patch: int = 8,
) -> dict:
    """Write a toy real/fake corpus in the standard directory layout.

    Real images are smoothed color fields; fakes add a high-frequency
    checkerboard of the given amplitude.  Regeneration from the same rng
    seed is byte-identical.  Returns the manifest (also written as JSON).
    """
    if side % patch:
        raise ValueError(f"synth_toy_dataset: side {side} not divisible by patch {patch}")
    out_dir = Path(out_dir)
    for sub, amp, tag in ((REAL_DIR, 0.0, "real"), (FAKE_DIR, artifact_amplitude, "fake")):
        class_dir = out_dir / sub
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            px = _toy_image(rng.derive(tag, i), side, amp)
            arr = np.clip(np.round(px * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr.transpose(1, 2, 0), "RGB").save(
                class_dir / f"{tag}_{i:05d}.png"
            )
    manifest = {
        "seed": rng.seed,
        "amplitude": artifact_amplitude,
        "side": side,
        "patch": patch,
        "n_per_class": n_per_class,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    return manifest
