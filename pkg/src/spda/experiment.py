"""Desk-scale experiments built from the library pieces.

``run_toy_experiment`` trains the toy FCN with and without SP augmentation
on synthetic data and scores both models on raw and on superpixelized test
images.  ``run_neighborhood_study`` measures how often an SP image stays
closer to its own source than that source is to any other original.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import NeighborhoodReport, flatten_images, neighborhood_check, pca_fit
from .augment import SpdaParams, sp
from .core import SeededRng
from .nn import Network, fcn_spec
from .slic import SlicParams
from .synthetic import SyntheticConfig, generate_samples
from .train import SpCache, TrainConfig, evaluate_miou, train_segmentation


@dataclass
class ToyConfig:
    """Settings of the controlled SPDA-vs-baseline comparison.

    The s range is scaled to 64x64 images so that cells hold roughly 27-82
    pixels, the same order as the cells of large microscopy images under the
    default [800, 2000] range.
    """

    size: int = 64
    num_classes: int = 3
    num_train: int = 20
    num_test: int = 100
    noise_sigma: float = 0.05
    s_lo: int = 50
    s_hi: int = 150
    steps: int = 2000
    lr: float = 2e-3
    crop: int = 32
    width: int = 8
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data_seed: int = 1
    test_seed: int = 2
    sp_test_seed: int = 99

    def train_config(self, seed: int, spda: bool) -> TrainConfig:
        return TrainConfig(
            s_lo=self.s_lo,
            s_hi=self.s_hi,
            max_steps=self.steps,
            seed=seed,
            lr=self.lr,
            input_size=(self.crop, self.crop),
            spda=spda,
            width=self.width,
        )


@dataclass
class ToyRun:
    seed: int
    spda: bool
    raw_miou: float
    sp_miou: float
    final_loss: float
    seconds: float


@dataclass
class ToyReport:
    config: ToyConfig
    runs: list[ToyRun] = field(default_factory=list)

    def _mean(self, spda: bool, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.runs if r.spda == spda]))

    @property
    def baseline_raw(self) -> float:
        return self._mean(False, "raw_miou")

    @property
    def spda_raw(self) -> float:
        return self._mean(True, "raw_miou")

    @property
    def baseline_sp(self) -> float:
        return self._mean(False, "sp_miou")

    @property
    def spda_sp(self) -> float:
        return self._mean(True, "sp_miou")

    def summary(self) -> str:
        lines = ["seed spda   raw_mIoU  sp_mIoU  final_loss  seconds"]
        for r in self.runs:
            lines.append(
                f"{r.seed:>4} {str(r.spda):<5} {r.raw_miou:9.4f} {r.sp_miou:8.4f} {r.final_loss:11.4f} {r.seconds:8.1f}"
            )
        lines.append(f"mean raw : baseline {self.baseline_raw:.4f}  spda {self.spda_raw:.4f}")
        lines.append(f"mean SP  : baseline {self.baseline_sp:.4f}  spda {self.spda_sp:.4f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["seeds"] = list(cfg["seeds"])
        return {"config": cfg, "runs": [asdict(r) for r in self.runs]}


def toy_data(cfg: ToyConfig):
    common = dict(size=cfg.size, num_classes=cfg.num_classes, noise_sigma=cfg.noise_sigma)
    train = generate_samples(SyntheticConfig(num_samples=cfg.num_train, **common), cfg.data_seed, "tr")
    test = generate_samples(SyntheticConfig(num_samples=cfg.num_test, **common), cfg.test_seed, "te")
    return train, test


def sp_test_images(test, cfg: ToyConfig) -> dict[str, np.ndarray]:
    """Superpixelize each test image once, at an s drawn uniformly from [s_lo, s_hi]."""
    gen = SeededRng(cfg.sp_test_seed).stream("sp-test")
    params = SlicParams(cfg.s_lo)
    return {smp.id: sp(smp.image, int(gen.integers(cfg.s_lo, cfg.s_hi + 1)), params) for smp in test}


def run_toy_experiment(cfg: ToyConfig | None = None, progress=None) -> ToyReport:
    cfg = cfg or ToyConfig()
    train, test = toy_data(cfg)
    sp_test = sp_test_images(test, cfg)
    # all SP training images are shared across runs
    cache = SpCache(SlicParams(cfg.s_lo), maxsize=cfg.num_train * (cfg.s_hi - cfg.s_lo + 1) + 1)
    report = ToyReport(cfg)
    for seed in cfg.seeds:
        for use in (False, True):
            t0 = time.perf_counter()
            net = Network(fcn_spec(1, cfg.num_classes, cfg.width), seed)
            res = train_segmentation(train, net, cfg.train_config(seed, use), cache=cache)
            run = ToyRun(
                seed=seed,
                spda=use,
                raw_miou=evaluate_miou(net, test, cfg.num_classes),
                sp_miou=evaluate_miou(net, test, cfg.num_classes, lambda smp: sp_test[smp.id]),
                final_loss=float(np.mean([r["loss"] for r in res.log[-50:]])),
                seconds=time.perf_counter() - t0,
            )
            report.runs.append(run)
            if progress is not None:
                progress(run)
    return report


@dataclass
class NeighborhoodConfig:
    size: int = 64
    num_samples: int = 20
    noise_sigma: float = 0.05
    s_lo: int = 200
    s_hi: int = 800
    count: int = 7  # evenly spaced s values per original
    pca_components: int | None = None
    seed: int = 1


def run_neighborhood_study(cfg: NeighborhoodConfig | None = None) -> NeighborhoodReport:
    cfg = cfg or NeighborhoodConfig()
    data = generate_samples(SyntheticConfig(size=cfg.size, num_samples=cfg.num_samples, noise_sigma=cfg.noise_sigma), cfg.seed)
    values = SpdaParams(cfg.s_lo, cfg.s_hi, count=cfg.count).s_values()
    originals = flatten_images([s.image for s in data], size=None)
    groups = [(i, flatten_images([sp(smp.image, s) for s in values], size=None)) for i, smp in enumerate(data)]
    pca = pca_fit(originals, cfg.pca_components) if cfg.pca_components else None
    return neighborhood_check(originals, groups, pca=pca)
