"""SPDA training: mixed mini-batches, the exact augmented objective, and the loop.

Every mini-batch pairs each drawn original ``(x_p, y_p)`` with a superpixelized
copy ``(SP(x_p, k), y_p)`` for a fresh ``k ~ U{s_lo..s_hi}``.  Averaged over
draws this is an unbiased estimate of the augmented objective

    1/n sum_i [ L(f(x_i), y_i) + lam * sum_{s=s_lo}^{s_hi} L(f(SP(x_i, s)), y_i) ]

with ``lam = 1 / (s_hi - s_lo + 1)`` (up to the overall factor 1/2 that the
half-and-half batch introduces).
"""

from __future__ import annotations

import io
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .augment import BasicAugmentConfig, basic_augment, sp
from .core import DataError, Provenance, Sample, SeededRng
from .metrics import confusion_matrix, mean_iu_from_confusion
from .nn import AdamState, Checkpoint, Network, adam_step, checkpoint_of, lr_schedule, spatial_cross_entropy
from .slic import SlicParams


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    s_lo: int = 800
    s_hi: int = 2000
    lam: float | None = None  # defaults to 1 / (s_hi - s_lo + 1)
    batch_size: int = 8
    lr: float = 5e-4
    lr_decayed: float = 5e-5
    lr_boundary: int = 30000
    max_steps: int = 2000
    seed: int = 0
    input_size: tuple[int, ...] | None = (192, 192)  # training crop; None keeps full images
    compactness: float = 20.0
    spda: bool = True
    basic_aug: bool = True
    plateau_window: int | None = None
    plateau_tol: float = 1e-3
    val_every: int = 0
    width: int = 8

    def __post_init__(self):
        if self.input_size is not None:
            self.input_size = tuple(int(v) for v in self.input_size)

    @property
    def lam_value(self) -> float:
        return 1.0 / (self.s_hi - self.s_lo + 1) if self.lam is None else float(self.lam)

    def validate(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2:
            raise TrainingError("batch_size must be even and >= 2")
        if not 1 <= self.s_lo <= self.s_hi:
            raise TrainingError(f"need 1 <= s_lo <= s_hi, got [{self.s_lo}, {self.s_hi}]")
        if self.lam_value <= 0:
            raise TrainingError("lambda must be positive")
        if self.max_steps < 1:
            raise TrainingError("max_steps must be positive")

    def slic_params(self) -> SlicParams:
        return SlicParams(self.s_lo, compactness=self.compactness)

    def augment_config(self) -> BasicAugmentConfig | None:
        if not self.basic_aug and self.input_size is None:
            return None
        if not self.basic_aug:
            return BasicAugmentConfig(crop_size=self.input_size, allow_flips=(False,) * 3, rotations=(0,))
        return BasicAugmentConfig(crop_size=self.input_size)

    def lr_at(self, step: int) -> float:
        return lr_schedule(step, self.lr, self.lr_decayed, self.lr_boundary)


class SpCache:
    """LRU cache of SP(x, s) keyed by (sample id, s)."""

    def __init__(self, slic_params: SlicParams | None = None, maxsize: int = 4096):
        self.slic_params = slic_params or SlicParams(1)
        self.maxsize = maxsize
        self._store: OrderedDict[tuple[str, int], np.ndarray] = OrderedDict()
        self.hits = self.misses = 0

    def get(self, sample: Sample, s: int) -> np.ndarray:
        key = (sample.id, int(s))
        if key in self._store:
            self._store.move_to_end(key)
            self.hits += 1
            return self._store[key]
        self.misses += 1
        out = sp(sample.image, int(s), self.slic_params)
        out.flags.writeable = False
        self._store[key] = out
        if len(self._store) > self.maxsize:
            self._store.popitem(last=False)
        return out

    def sp_sample(self, sample: Sample, s: int) -> Sample:
        prov = Provenance("spda", source=sample.id, s=int(s))
        return Sample(self.get(sample, s), sample.label, sample.num_classes, sample.id, prov)


def build_minibatch(
    dataset: list[Sample],
    config: TrainConfig,
    gen: np.random.Generator,
    cache: SpCache | None = None,
    aug_gen: np.random.Generator | None = None,
) -> list[Sample]:
    """Draw one mini-batch: originals first, each paired SP copy right after it.

    With ``config.spda`` off the batch is ``batch_size`` plain draws.  Basic
    augmentation, when configured, is applied to every sample from ``aug_gen``.
    """
    if not dataset:
        raise DataError("empty dataset")
    config.validate()
    if cache is None:
        cache = SpCache(config.slic_params())
    n = len(dataset)
    batch: list[Sample] = []
    if config.spda:
        for _m in range(config.batch_size // 2):
            p = int(gen.integers(0, n))
            batch.append(dataset[p])
            k = int(gen.integers(config.s_lo, config.s_hi + 1))
            batch.append(cache.sp_sample(dataset[p], k))
    else:
        for _m in range(config.batch_size):
            batch.append(dataset[int(gen.integers(0, n))])
    aug = config.augment_config()
    if aug is not None:
        if aug_gen is None:
            raise DataError("basic augmentation needs an augmentation stream")
        batch = [basic_augment(s, aug, aug_gen) for s in batch]
    return batch


def batch_loss(net: Network, batch: list[Sample]) -> tuple[float, np.ndarray]:
    x = np.stack([s.image for s in batch])
    y = np.stack([s.label for s in batch])
    logits = net.logits(x)
    return spatial_cross_entropy(logits, y)


def sample_loss(net: Network, image: np.ndarray, label: np.ndarray) -> float:
    loss, _ = spatial_cross_entropy(net.logits(image[None]), label[None])
    return loss


def eq6_terms(
    net: Network, dataset: list[Sample], config: TrainConfig, cache: SpCache | None = None, max_terms: int = 5000
) -> tuple[float, float]:
    """Return ``(raw_risk, sp_term)`` of the augmented objective, enumerating every s."""
    n = len(dataset)
    if n == 0:
        raise DataError("empty dataset")
    n_s = config.s_hi - config.s_lo + 1
    if n * n_s > max_terms:
        raise TrainingError(f"{n * n_s} SP terms exceed the enumeration cap {max_terms}")
    if cache is None:
        cache = SpCache(config.slic_params())
    lam = config.lam_value
    raw = sp_sum = 0.0
    for smp in dataset:
        raw += sample_loss(net, smp.image, smp.label)
        inner = 0.0
        for s in range(config.s_lo, config.s_hi + 1):
            inner += sample_loss(net, cache.get(smp, s), smp.label)
        sp_sum += lam * inner
    return raw / n, sp_sum / n


def eq6_exact_loss(net, dataset, config, cache=None, max_terms: int = 5000) -> float:
    raw, sp_term = eq6_terms(net, dataset, config, cache, max_terms)
    return raw + sp_term


def predict(net: Network, image: np.ndarray) -> np.ndarray:
    return np.argmax(net.logits(np.asarray(image)[None])[0], axis=-1)


def evaluate_miou(
    net: Network,
    samples: list[Sample],
    num_classes: int,
    transform: Callable[[Sample], np.ndarray] | None = None,
) -> float:
    """Mean IoU over a sample set, pooling the confusion matrix across images."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for smp in samples:
        img = smp.image if transform is None else transform(smp)
        conf += confusion_matrix(predict(net, img), smp.label, num_classes)
    return mean_iu_from_confusion(conf)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    stopped: str = "max_steps"

    def log_text(self) -> str:
        buf = io.StringIO()
        for row in self.log:
            buf.write(format_log_row(row) + "\n")
        return buf.getvalue()


def format_log_row(row: dict) -> str:
    parts = [f"step={row['step']}", f"lr={row['lr']:.6g}", f"loss={row['loss']:.8f}"]
    if row.get("val_miou") is not None:
        parts.append(f"val_miou={row['val_miou']:.6f}")
    return " ".join(parts)


def train_segmentation(
    dataset: list[Sample],
    net: Network,
    config: TrainConfig,
    val_set: list[Sample] | None = None,
    cache: SpCache | None = None,
    log_file: str | os.PathLike | None = None,
) -> TrainResult:
    """Train ``net`` in place with Adam on half-original, half-SP mini-batches."""
    config.validate()
    if not dataset:
        raise DataError("empty dataset")
    rng = SeededRng(config.seed)
    gen = rng.stream("sampling")
    aug_gen = rng.stream("augmentation")
    if cache is None:
        cache = SpCache(config.slic_params())
    num_classes = dataset[0].num_classes
    state = AdamState(lr=config.lr_at(1))
    log: list[dict] = []
    ema = best = None
    since_best = 0
    stopped = "max_steps"
    fh = open(log_file, "w", encoding="utf-8") if log_file is not None else None
    try:
        for step in range(1, config.max_steps + 1):
            batch = build_minibatch(dataset, config, gen, cache, aug_gen)
            loss, grad = batch_loss(net, batch)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            grads = net.backward(grad)
            state.lr = config.lr_at(step)
            adam_step(net.parameters(), grads, state)
            row = {"step": step, "lr": state.lr, "loss": loss, "val_miou": None}
            if val_set and config.val_every and step % config.val_every == 0:
                row["val_miou"] = evaluate_miou(net, val_set, num_classes)
            log.append(row)
            if fh is not None:
                fh.write(format_log_row(row) + "\n")
            if config.plateau_window:
                ema = loss if ema is None else 0.9 * ema + 0.1 * loss
                if best is None or ema < best - config.plateau_tol:
                    best, since_best = ema, 0
                else:
                    since_best += 1
                    if since_best >= config.plateau_window:
                        stopped = "plateau"
                        break
    finally:
        if fh is not None:
            fh.close()
    meta = {"train_config": _jsonable(asdict(config)), "stopped": stopped}
    return TrainResult(checkpoint_of(net, step, state, meta), log, stopped)


def _jsonable(d: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def split_train_val(samples: list[Sample], val_fraction: float = 0.2) -> tuple[list[Sample], list[Sample]]:
    """Hold out the last ``val_fraction`` of originals; held-out samples are never augmented."""
    n_val = int(round(len(samples) * val_fraction))
    if n_val == 0:
        return list(samples), []
    return list(samples[:-n_val]), list(samples[-n_val:])
