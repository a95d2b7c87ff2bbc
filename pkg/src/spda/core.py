"""Shared data types, file formats and seeded randomness.

Images are plain float32 numpy arrays laid out ``(H, W, C)`` for 2D and
``(D, H, W, C)`` for 3D, with nominal values in ``[0, 1]``.  Label maps are
integer arrays over the spatial extents only.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

VOL_MAGIC = b"SPDAVOL1".ljust(16, b"\0")
MANIFEST_VERSION = 1


class DataError(ValueError):
    """Raised when an image, label map or manifest is malformed."""


# --------------------------------------------------------------------------
# Validation helpers
# --------------------------------------------------------------------------


def as_tensor(x: np.ndarray) -> np.ndarray:
    """Coerce ``x`` to a float32 image tensor, adding a channel axis to bare grids."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim not in (3, 4):
        raise DataError(f"tensor must be (H,W,C) or (D,H,W,C), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("tensor contains non-finite values")
    return arr


def spatial_shape(image: np.ndarray) -> tuple[int, ...]:
    return tuple(image.shape[:-1])


def check_label(label: np.ndarray, num_classes: int, shape: tuple[int, ...] | None = None) -> np.ndarray:
    lab = np.asarray(label)
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.round(lab)):
            raise DataError("label map must hold integer class ids")
    lab = lab.astype(np.int64)
    if shape is not None and lab.shape != tuple(shape):
        raise DataError(f"label shape {lab.shape} does not match image extents {tuple(shape)}")
    if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
        raise DataError(f"label ids must lie in [0, {num_classes}), found [{lab.min()}, {lab.max()}]")
    return lab


# --------------------------------------------------------------------------
# Samples and manifests
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Provenance:
    """Where a sample came from: an original, an SP copy or a basic augmentation."""

    kind: str = "original"
    source: str | None = None
    s: int | None = None
    transform: dict | None = None

    def __post_init__(self):
        if self.kind not in ("original", "spda", "basic"):
            raise DataError(f"unknown provenance kind {self.kind!r}")
        if self.kind == "spda" and self.s is None:
            raise DataError("spda provenance must record s")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.source is not None:
            d["source"] = self.source
        if self.s is not None:
            d["s"] = int(self.s)
        if self.transform is not None:
            d["transform"] = self.transform
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(kind=d.get("kind", "original"), source=d.get("source"), s=d.get("s"), transform=d.get("transform"))


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    label: np.ndarray
    num_classes: int
    id: str = "sample"
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        img = as_tensor(self.image)
        lab = check_label(self.label, self.num_classes, spatial_shape(img))
        img.flags.writeable = False
        lab.flags.writeable = False
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "label", lab)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    label: str
    provenance: Provenance = field(default_factory=Provenance)

    def to_dict(self) -> dict:
        return {"id": self.id, "image": self.image, "label": self.label, "provenance": self.provenance.to_dict()}


@dataclass
class DatasetManifest:
    """Ordered list of samples stored on disk, with paths relative to ``root``."""

    entries: list[ManifestEntry]
    num_classes: int
    root: Path = Path(".")

    @property
    def n(self) -> int:
        return sum(1 for e in self.entries if e.provenance.kind == "original")

    def validate(self, check_files: bool = True) -> None:
        if self.n < 1:
            raise DataError("manifest must contain at least one original sample")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest ids are not unique")
        if check_files:
            for e in self.entries:
                for p in (e.image, e.label):
                    if not (self.root / p).is_file():
                        raise DataError(f"manifest references missing file {p}")

    def originals(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.provenance.kind == "original"]

    def load(self, entry: ManifestEntry) -> Sample:
        return load_sample(self.root / entry.image, self.root / entry.label, entry, self.num_classes)

    def load_all(self, kind: str | None = None) -> list[Sample]:
        return [self.load(e) for e in self.entries if kind is None or e.provenance.kind == kind]

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        doc = {
            "version": MANIFEST_VERSION,
            "num_classes": self.num_classes,
            "n": self.n,
            "samples": [e.to_dict() for e in self.entries],
        }
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | os.PathLike, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            entries = [
                ManifestEntry(d["id"], d["image"], d["label"], Provenance.from_dict(d.get("provenance", {})))
                for d in doc["samples"]
            ]
            num_classes = int(doc["num_classes"])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot parse manifest {path}: {exc}") from exc
        m = cls(entries, num_classes, path.parent)
        m.validate(check_files)
        return m


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def write_raw(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Write ``arr`` in the SPDAVOL1 raw format.

    2D tensors ``(H, W, C)`` are stored with ``D = 1``; bare ``(H, W)`` or
    ``(D, H, W)`` grids are stored with ``C = 1``.
    """
    a = np.asarray(arr, dtype="<f4")
    if a.ndim == 2:
        a = a[None, ..., None]
    elif a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise DataError(f"cannot store array of shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(VOL_MAGIC)
        fh.write(struct.pack("<4I", *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_raw(path: str | os.PathLike) -> np.ndarray:
    """Read an SPDAVOL1 file; ``D == 1`` files come back as 2D ``(H, W, C)``."""
    buf = Path(path).read_bytes()
    if len(buf) < 32 or buf[:16] != VOL_MAGIC:
        raise DataError(f"{path}: not an SPDAVOL1 file")
    dims = struct.unpack("<4I", buf[16:32])
    count = int(np.prod(dims))
    if len(buf) != 32 + 4 * count:
        raise DataError(f"{path}: payload size does not match header {dims}")
    a = np.frombuffer(buf, dtype="<f4", offset=32).reshape(dims).astype(np.float32)
    return a[0] if dims[0] == 1 else a


def _is_png(path: str | os.PathLike) -> bool:
    return str(path).lower().endswith(".png")


def read_image(path: str | os.PathLike) -> np.ndarray:
    if _is_png(path):
        try:
            with Image.open(path) as im:
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
                data = np.asarray(im)
        except OSError as exc:
            raise DataError(f"{path}: {exc}") from exc
        return as_tensor(data.astype(np.float32) / 255.0)
    return as_tensor(read_raw(path))


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    img = as_tensor(image)
    if _is_png(path):
        if img.ndim != 3 or img.shape[-1] not in (1, 3):
            raise DataError("PNG output needs a 2D gray or RGB image")
        q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(q[..., 0] if q.shape[-1] == 1 else q).save(path)
    else:
        write_raw(path, img)


def read_label(path: str | os.PathLike) -> np.ndarray:
    if _is_png(path):
        try:
            with Image.open(path) as im:
                data = np.asarray(im)
        except OSError as exc:
            raise DataError(f"{path}: {exc}") from exc
        if data.ndim != 2:
            raise DataError(f"{path}: label PNG must be single channel")
        return data.astype(np.int64)
    a = read_raw(path)
    if a.shape[-1] != 1:
        raise DataError(f"{path}: label volume must have C=1")
    a = a[..., 0]
    if not np.all(a == np.round(a)):
        raise DataError(f"{path}: label volume holds non-integer ids")
    return a.astype(np.int64)


def write_label(path: str | os.PathLike, label: np.ndarray) -> None:
    lab = np.asarray(label)
    if _is_png(path):
        if lab.ndim != 2 or lab.max(initial=0) > 255:
            raise DataError("label PNG needs a 2D map with ids < 256")
        Image.fromarray(lab.astype(np.uint8)).save(path)
    else:
        write_raw(path, lab.astype(np.float32)[..., None])


def load_sample(
    path_image: str | os.PathLike,
    path_label: str | os.PathLike,
    entry: ManifestEntry | None = None,
    num_classes: int = 256,
) -> Sample:
    image = read_image(path_image)
    label = read_label(path_label)
    if entry is None:
        entry = ManifestEntry(Path(path_image).stem, str(path_image), str(path_label))
    return Sample(image, label, num_classes, entry.id, entry.provenance)


def save_sample(sample: Sample, root: str | os.PathLike, stem: str, volume: bool | None = None) -> ManifestEntry:
    """Write ``sample`` under ``root`` as ``<stem>.png`` / ``<stem>_label.png`` (raw for 3D)."""
    root = Path(root)
    if volume is None:
        volume = sample.image.ndim == 4
    ext = ".vol" if volume else ".png"
    img_name, lab_name = f"{stem}{ext}", f"{stem}_label{ext}"
    write_image(root / img_name, sample.image)
    write_label(root / lab_name, sample.label)
    return ManifestEntry(sample.id, img_name, lab_name, sample.provenance)


# --------------------------------------------------------------------------
# Randomness
# --------------------------------------------------------------------------


class SeededRng:
    """Root seed with independent, named PCG64 streams.

    ``stream("sampling")`` always yields a fresh generator positioned at the
    start of that purpose's stream, so callers that want to continue a stream
    must hold on to the returned generator.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF

    def stream(self, purpose: str, *extra: int) -> np.random.Generator:
        key = (zlib.crc32(purpose.encode("utf-8")), *(int(e) for e in extra))
        ss = np.random.SeedSequence(self.seed, spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *extra: int) -> "SeededRng":
        seq = np.random.SeedSequence(self.seed, spawn_key=(0x5EED, *extra))
        return SeededRng(int(seq.generate_state(1, dtype=np.uint64)[0]))

    def __repr__(self):
        return f"SeededRng({self.seed})"


def ensure_rng(rng: SeededRng | int | None) -> SeededRng:
    if isinstance(rng, SeededRng):
        return rng
    return SeededRng(0 if rng is None else rng)
