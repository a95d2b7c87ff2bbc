"""Desk-scale synthetic segmentation data.

Each image is a background field with non-overlapping ellipse and rectangle
blobs, one or more per foreground class.  Every class carries its own base
intensity plus a striped texture (the sign of a class-specific sinusoid), so
with zero pixel noise every region is exactly piecewise-constant while the
texture still gives superpixelization something to smooth away.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DataError, DatasetManifest, Provenance, Sample, SeededRng, ensure_rng, save_sample


@dataclass(frozen=True)
class SyntheticConfig:
    size: int = 64
    num_classes: int = 3
    num_samples: int = 20
    noise_sigma: float = 0.05
    texture_amplitude: float = 0.12
    blobs_per_class: int = 2

    def validate(self) -> None:
        if self.size < 32:
            raise DataError("synthetic images need size >= 32")
        if not 2 <= self.num_classes <= 4:
            raise DataError("num_classes must be in [2, 4]")
        if self.num_samples < 1:
            raise DataError("num_samples must be positive")
        if self.noise_sigma < 0 or self.texture_amplitude < 0:
            raise DataError("noise_sigma and texture_amplitude must be non-negative")


# base intensity, stripe period (pixels) and stripe angle per class id
_CLASS_STYLE = [
    (0.30, 9.0, 0.0),
    (0.62, 4.0, np.pi / 4),
    (0.45, 6.0, np.pi / 2),
    (0.80, 5.0, 3 * np.pi / 4),
]


def _blob_mask(shape, cy, cx, ry, rx, kind):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    if kind == "ellipse":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def _render_label(size: int, num_classes: int, blobs_per_class: int, gen: np.random.Generator) -> np.ndarray:
    label = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)
    for cls in range(1, num_classes):
        placed = 0
        for _attempt in range(200):
            if placed >= blobs_per_class:
                break
            ry, rx = gen.uniform(0.08, 0.2, size=2) * size
            cy = gen.uniform(ry + 1, size - ry - 2)
            cx = gen.uniform(rx + 1, size - rx - 2)
            kind = "ellipse" if gen.random() < 0.5 else "rect"
            mask = _blob_mask((size, size), cy, cx, ry, rx, kind)
            # one-pixel margin keeps blobs from touching
            grown = mask.copy()
            grown[1:] |= mask[:-1]
            grown[:-1] |= mask[1:]
            grown[:, 1:] |= mask[:, :-1]
            grown[:, :-1] |= mask[:, 1:]
            if mask.sum() < 16 or (grown & occupied).any():
                continue
            label[mask] = cls
            occupied |= grown
            placed += 1
        if placed == 0:
            raise DataError("could not place a blob for every class; increase size")
    return label


def render_image(label: np.ndarray, cfg: SyntheticConfig, gen: np.random.Generator) -> np.ndarray:
    size = label.shape[0]
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    img = np.zeros(label.shape, dtype=np.float64)
    phase = gen.uniform(0, 2 * np.pi, size=len(_CLASS_STYLE))
    for cls in range(cfg.num_classes):
        base, period, angle = _CLASS_STYLE[cls]
        wave = np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase[cls])
        stripes = np.where(wave >= 0, 1.0, -1.0)
        m = label == cls
        img[m] = base + cfg.texture_amplitude * stripes[m]
    if cfg.noise_sigma > 0:
        img = img + gen.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[..., None]


def generate_samples(cfg: SyntheticConfig, rng: SeededRng | int | None = None, prefix: str = "img") -> list[Sample]:
    """Generate ``cfg.num_samples`` samples; a pure function of ``(cfg, seed)``."""
    cfg.validate()
    gen = ensure_rng(rng).stream("synthetic")
    samples = []
    for i in range(cfg.num_samples):
        label = _render_label(cfg.size, cfg.num_classes, cfg.blobs_per_class, gen)
        image = render_image(label, cfg, gen)
        samples.append(Sample(image, label, cfg.num_classes, f"{prefix}{i:04d}", Provenance("original")))
    return samples


def generate_synthetic(
    cfg: SyntheticConfig, rng: SeededRng | int | None, out_dir: str | os.PathLike, prefix: str = "img"
) -> DatasetManifest:
    """Generate a dataset, write PNGs plus ``manifest.json`` to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = [save_sample(s, out, s.id) for s in generate_samples(cfg, rng, prefix)]
    manifest = DatasetManifest(entries, cfg.num_classes, out)
    manifest.save(out / "manifest.json")
    return manifest
