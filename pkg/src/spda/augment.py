"""Superpixelized images SP(x, s) and basic geometric augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError, Provenance, Sample, as_tensor
from .slic import SlicParams, segment


def superpixelize(image: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Replace every pixel by the per-channel mean of its cell."""
    img = as_tensor(image)
    cells = np.asarray(cells)
    if cells.shape != img.shape[:-1]:
        raise DataError(f"cell map shape {cells.shape} does not match image extents {img.shape[:-1]}")
    flat = cells.reshape(-1).astype(np.int64)
    _, inv = np.unique(flat, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv)
    C = img.shape[-1]
    pix = img.reshape(-1, C).astype(np.float64)
    means = np.empty((len(counts), C))
    for c in range(C):
        means[:, c] = np.bincount(inv, weights=pix[:, c]) / counts
    return means[inv].astype(np.float32).reshape(img.shape)


def sp(image: np.ndarray, s: int, slic_params: SlicParams | None = None) -> np.ndarray:
    """SP(x, s): segment with SLIC (or supervoxel SLIC for volumes) then superpixelize."""
    params = SlicParams(int(s)) if slic_params is None else slic_params.with_s(s)
    return superpixelize(image, segment(image, params))


@dataclass(frozen=True)
class SpdaParams:
    s_lo: int = 800
    s_hi: int = 2000
    offline_s_values: tuple[int, ...] | None = None
    count: int | None = None  # evenly spaced s values when no explicit list is given

    def validate(self, num_pixels: int | None = None) -> None:
        if not 1 <= self.s_lo <= self.s_hi:
            raise DataError(f"need 1 <= s_lo <= s_hi, got [{self.s_lo}, {self.s_hi}]")
        if num_pixels is not None and self.s_hi > num_pixels:
            raise DataError(f"s_hi={self.s_hi} exceeds pixel count {num_pixels}")
        if self.offline_s_values is not None:
            if len(self.offline_s_values) == 0:
                raise DataError("offline_s_values is empty")
            bad = [s for s in self.offline_s_values if not self.s_lo <= s <= self.s_hi]
            if bad:
                raise DataError(f"offline s values {bad} outside [{self.s_lo}, {self.s_hi}]")

    def s_values(self) -> list[int]:
        if self.offline_s_values is not None:
            return [int(s) for s in self.offline_s_values]
        if self.s_lo == self.s_hi:
            return [self.s_lo]
        if self.count is None:
            return list(range(self.s_lo, self.s_hi + 1))
        if self.count < 1:
            raise DataError("count must be positive")
        vals = np.rint(np.linspace(self.s_lo, self.s_hi, self.count)).astype(int)
        return sorted(set(int(v) for v in vals))


def generate_augmented_set(sample: Sample, params: SpdaParams, slic_params: SlicParams | None = None) -> list[Sample]:
    """One SP copy of ``sample`` per requested s; labels are the untouched original."""
    params.validate(int(np.prod(sample.image.shape[:-1])))
    values = params.s_values()
    if not values:
        raise DataError("no s values requested")
    out = []
    for s in values:
        prov = Provenance("spda", source=sample.id, s=s)
        out.append(Sample(sp(sample.image, s, slic_params), sample.label, sample.num_classes, f"{sample.id}_sp{s}", prov))
    return out


@dataclass(frozen=True)
class BasicAugmentConfig:
    crop_size: tuple[int, ...] | None = None  # None keeps the full extent
    allow_flips: tuple[bool, ...] | None = None  # None flips any axis
    rotations: tuple[int, ...] = (0, 1, 2, 3)  # quarter turns, counter-clockwise


@dataclass(frozen=True)
class Transform:
    """One concrete draw of crop offset, per-axis flips and quarter-turn rotation."""

    offset: tuple[int, ...]
    size: tuple[int, ...]
    flips: tuple[bool, ...]
    quarter_turns: int = 0

    def apply(self, arr: np.ndarray) -> np.ndarray:
        """Transform the leading spatial axes of ``arr``; trailing channel axes ride along."""
        nd = len(self.size)
        sl = tuple(slice(o, o + s) for o, s in zip(self.offset, self.size))
        out = arr[sl]
        for ax, f in enumerate(self.flips):
            if f:
                out = np.flip(out, axis=ax)
        if self.quarter_turns % 4:
            # rotate in the in-plane (H, W) axes
            out = np.rot90(out, k=self.quarter_turns, axes=(nd - 2, nd - 1))
        return np.ascontiguousarray(out)

    def to_dict(self) -> dict:
        return {
            "offset": list(self.offset),
            "size": list(self.size),
            "flips": list(self.flips),
            "quarter_turns": int(self.quarter_turns),
        }


def draw_transform(spatial: tuple[int, ...], config: BasicAugmentConfig, gen: np.random.Generator) -> Transform:
    nd = len(spatial)
    size = tuple(spatial) if config.crop_size is None else tuple(config.crop_size)
    if len(size) != nd or any(c > n or c < 1 for c, n in zip(size, spatial)):
        raise DataError(f"crop {size} does not fit image extents {spatial}")
    offset = tuple(int(gen.integers(0, n - c + 1)) for c, n in zip(size, spatial))
    allow = (True,) * nd if config.allow_flips is None else tuple(config.allow_flips)
    allow = allow + (False,) * max(0, nd - len(allow))
    flips = tuple(bool(a and gen.random() < 0.5) for a in allow[:nd])
    rots = list(config.rotations)
    if size[-1] != size[-2]:
        rots = [r for r in rots if r % 2 == 0] or [0]
    k = int(rots[gen.integers(0, len(rots))]) if rots else 0
    return Transform(offset, size, flips, k)


def basic_augment(sample: Sample, config: BasicAugmentConfig, gen: np.random.Generator) -> Sample:
    """Apply the same random crop, flips and rotation to image and label."""
    t = draw_transform(sample.label.shape, config, gen)
    image = t.apply(sample.image)
    label = t.apply(sample.label)
    prov = sample.provenance
    info = t.to_dict()
    if prov.kind == "original":
        prov = Provenance("basic", source=sample.id, transform=info)
    else:
        prov = Provenance(prov.kind, prov.source, prov.s, info)
    return Sample(image, label, sample.num_classes, sample.id, prov)
