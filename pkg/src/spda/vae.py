"""A small dense VAE over flattened gray patches, for latent-distribution studies."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import SeededRng
from .nn import AdamState, Checkpoint, Network, NetworkError, adam_step


@dataclass(frozen=True)
class VaeSpec:
    patch: int = 16
    hidden: int = 64
    latent: int = 8

    def __post_init__(self):
        if self.latent < 2:
            raise NetworkError("latent dim must be >= 2")

    @property
    def inputs(self) -> int:
        return self.patch * self.patch


@dataclass(frozen=True)
class VaeTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


def kl_to_standard_normal(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-row KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


class VAE:
    """Encoder -> (mu, logvar) heads -> reparameterized z -> decoder.

    The loss per patch is the summed squared reconstruction error plus the
    KL to the unit Gaussian prior, i.e. the negative ELBO under a fixed-variance
    Gaussian likelihood.
    """

    def __init__(self, spec: VaeSpec, rng: SeededRng | int | None = 0, dtype=np.float32):
        self.spec = spec
        root = rng if isinstance(rng, SeededRng) else SeededRng(0 if rng is None else rng)
        P, H, L = spec.inputs, spec.hidden, spec.latent
        self.enc = Network([{"type": "dense", "in": P, "out": H}, {"type": "relu"}], root.child(1), dtype)
        self.mu_head = Network([{"type": "dense", "in": H, "out": L}], root.child(2), dtype)
        self.lv_head = Network([{"type": "dense", "in": H, "out": L}], root.child(3), dtype, zero_last=True)
        self.dec = Network(
            [{"type": "dense", "in": L, "out": H}, {"type": "relu"}, {"type": "dense", "in": H, "out": P}],
            root.child(4),
            dtype,
        )
        self._cache = None

    @property
    def parts(self) -> list[Network]:
        return [self.enc, self.mu_head, self.lv_head, self.dec]

    def parameters(self) -> list[np.ndarray]:
        return [p for net in self.parts for p in net.parameters()]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([net.get_flat() for net in self.parts])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for net in self.parts:
            n = net.num_parameters()
            net.set_flat(flat[i : i + n])
            i += n
        if i != flat.size:
            raise NetworkError("flat buffer size does not match VAE")

    def astype(self, dtype) -> "VAE":
        other = VAE.__new__(VAE)
        other.spec = self.spec
        other.enc, other.mu_head, other.lv_head, other.dec = (n.astype(dtype) for n in self.parts)
        other._cache = None
        return other

    def encode(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self.enc.logits(x)
        return self.mu_head.logits(h), self.lv_head.logits(h)

    def loss(self, x: np.ndarray, eps: np.ndarray) -> float:
        """Mean negative ELBO over the batch for fixed noise ``eps``; caches for backward."""
        x = np.asarray(x, dtype=self.enc.dtype)
        mu, lv = self.encode(x)
        std = np.exp(0.5 * lv)
        z = mu + std * eps
        xr = self.dec.logits(z)
        B = x.shape[0]
        rec = np.sum((xr - x) ** 2, axis=-1)
        kl = kl_to_standard_normal(mu, lv)
        self._cache = (x, mu, lv, std, eps, xr, B)
        return float(np.mean(rec + kl))

    def backward(self) -> list[np.ndarray]:
        if self._cache is None:
            raise NetworkError("backward called before loss")
        x, mu, lv, std, eps, xr, B = self._cache
        self.dec.backward(2.0 * (xr - x) / B)
        dz = self.dec.input_grad
        dmu = dz + mu / B
        dlv = dz * eps * 0.5 * std + 0.5 * (np.exp(lv) - 1.0) / B
        self.mu_head.backward(dmu)
        dh = self.mu_head.input_grad
        self.lv_head.backward(dlv)
        dh = dh + self.lv_head.input_grad
        self.enc.backward(dh)
        return [g for net in self.parts for g in net.gradients()]

    def to_checkpoint(self, step: int = 0, meta: dict | None = None) -> Checkpoint:
        spec = {"kind": "vae", **asdict(self.spec)}
        return Checkpoint(spec, self.get_flat().astype(np.float32), step, None, dict(meta or {}))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "VAE":
        spec = dict(ckpt.spec)
        if spec.pop("kind", None) != "vae":
            raise NetworkError("checkpoint does not hold a VAE")
        vae = cls(VaeSpec(**spec))
        vae.set_flat(ckpt.params)
        return vae


def extract_patches(images, patch: int) -> np.ndarray:
    """Non-overlapping ``patch x patch`` tiles of the first channel, flattened."""
    out = []
    for img in images:
        a = np.asarray(img, dtype=np.float32)
        if a.ndim == 3:
            a = a[..., 0]
        H, W = a.shape
        if H < patch or W < patch:
            raise NetworkError(f"image {a.shape} smaller than patch {patch}")
        h, w = H // patch, W // patch
        tiles = a[: h * patch, : w * patch].reshape(h, patch, w, patch).transpose(0, 2, 1, 3)
        out.append(tiles.reshape(h * w, patch * patch))
    return np.concatenate(out)


def train_vae(patches: np.ndarray, spec: VaeSpec, config: VaeTrainConfig) -> tuple[Checkpoint, list[float]]:
    """Minimize the negative ELBO with Adam; returns the checkpoint and per-step losses."""
    X = np.asarray(patches, dtype=np.float32)
    if X.ndim != 2 or X.shape[1] != spec.inputs:
        raise NetworkError(f"patches must be (N, {spec.inputs}), got {X.shape}")
    if len(X) < 100:
        raise NetworkError("need at least 100 patches")
    rng = SeededRng(config.seed)
    vae = VAE(spec, rng)
    gen = rng.stream("sampling")
    noise = rng.stream("reparam")
    state = AdamState(lr=config.lr)
    losses = []
    for step in range(1, config.steps + 1):
        idx = gen.integers(0, len(X), size=config.batch_size)
        eps = noise.standard_normal((config.batch_size, spec.latent)).astype(np.float32)
        loss = vae.loss(X[idx], eps)
        if not np.isfinite(loss):
            raise FloatingPointError(f"VAE diverged at step {step}")
        adam_step(vae.parameters(), vae.backward(), state)
        losses.append(loss)
    return vae.to_checkpoint(config.steps, {"seed": config.seed}), losses


def mean_elbo(vae: VAE, patches: np.ndarray, seed: int = 0) -> float:
    """Single-sample Monte-Carlo estimate of the mean ELBO over ``patches``."""
    X = np.asarray(patches, dtype=np.float32)
    eps = np.random.default_rng(seed).standard_normal((len(X), vae.spec.latent)).astype(np.float32)
    return -vae.loss(X, eps)


def encode_latents(vae: VAE | Checkpoint, images) -> np.ndarray:
    """Per-image latent vector: encoder means averaged over the image's patches."""
    if isinstance(vae, Checkpoint):
        vae = VAE.from_checkpoint(vae)
    out = []
    for img in images:
        P = extract_patches([img], vae.spec.patch)
        mu, _ = vae.encode(P)
        out.append(mu.mean(axis=0))
    return np.stack(out).astype(np.float64)
