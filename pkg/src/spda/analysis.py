"""Distribution-shift analyses of SP-augmented data.

* PCA of flattened images and a nearest-original neighborhood check: an SP
  image counts as close when its distance to its source is strictly smaller
  than the distance from that source to any other original.
* Diagonal-Gaussian fits of VAE latents and closed-form KL comparisons
  between training and test distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import zoom

from .vae import VaeSpec, VaeTrainConfig, encode_latents, extract_patches, train_vae, VAE

VAR_FLOOR = 1e-8


class AnalysisError(ValueError):
    pass


def flatten_images(images, size: int | None = 64) -> np.ndarray:
    """Resize each 2D image to ``size x size`` (if needed) and flatten to a row."""
    rows = []
    for img in images:
        a = np.asarray(img, dtype=np.float64)
        if a.ndim == 2:
            a = a[..., None]
        if size is not None and a.shape[:2] != (size, size):
            a = zoom(a, (size / a.shape[0], size / a.shape[1], 1), order=1)
        rows.append(a.reshape(-1))
    return np.stack(rows)


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, dim), orthonormal rows
    explained_variance: np.ndarray  # (k,), non-increasing

    def transform(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords) @ self.components + self.mean


def pca_fit(data, n_components: int) -> PcaModel:
    """Top eigenvectors of the sample covariance; each sign fixed so the largest-|.| entry is positive."""
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise AnalysisError("pca needs at least two vectors")
    n, dim = X.shape
    if not 1 <= n_components <= dim:
        raise AnalysisError(f"n_components must lie in [1, {dim}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    if not np.any(Xc):
        raise AnalysisError("all input vectors are identical")
    # thin SVD of the centered data gives the covariance eigenvectors directly
    _, sv, vt = np.linalg.svd(Xc, full_matrices=False)
    var = sv**2 / (n - 1)
    k = n_components
    comps = vt[:k]
    if k > len(var):
        # more components than the data rank: complete the basis
        q, _ = np.linalg.qr(np.vstack([vt, np.eye(dim)]).T)
        comps = q.T[:k]
        var = np.concatenate([var, np.zeros(k - len(var))])
    comps = comps.copy()
    for row in comps:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1
    return PcaModel(mean, comps, var[:k].copy())


# --------------------------------------------------------------------------
# Neighborhood check
# --------------------------------------------------------------------------


@dataclass
class NeighborhoodReport:
    fraction: float
    per_image: list[dict] = field(default_factory=list)


def neighborhood_check(originals, augmented_groups, pca: PcaModel | None = None) -> NeighborhoodReport:
    """Test ``d(SP(x_i), x_i) < min_{j != i} d(x_i, x_j)`` for every augmented image.

    ``originals`` is an ``(n, dim)`` array of flattened originals and
    ``augmented_groups`` a sequence of ``(source_index, (m, dim) array)``
    pairs, or a mapping from source index to such arrays.  When ``pca`` is
    given, distances are taken between PCA projections.
    """
    X = np.asarray(originals, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise AnalysisError("need at least two originals")
    groups = augmented_groups.items() if isinstance(augmented_groups, dict) else augmented_groups
    if pca is not None:
        X = pca.transform(X)
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    nearest_other = np.sqrt(d2.min(axis=1))
    per_image, hits, total = [], 0, 0
    for src, aug in groups:
        src = int(src)
        if not 0 <= src < len(X):
            raise AnalysisError(f"augmented image refers to unknown original {src}")
        A = np.atleast_2d(np.asarray(aug, dtype=np.float64))
        if pca is not None:
            A = pca.transform(A)
        if A.shape[1] != X.shape[1]:
            raise AnalysisError("augmented images do not match original dimensionality")
        d_self = np.sqrt(np.sum((A - X[src]) ** 2, axis=1))
        ok = d_self < nearest_other[src]
        hits += int(ok.sum())
        total += len(ok)
        per_image.append(
            {
                "source": src,
                "self_distance": d_self.tolist(),
                "nearest_other": float(nearest_other[src]),
                "satisfied": ok.tolist(),
            }
        )
    if total == 0:
        raise AnalysisError("no augmented images given")
    return NeighborhoodReport(hits / total, per_image)


# --------------------------------------------------------------------------
# Gaussians and KL
# --------------------------------------------------------------------------


@dataclass
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.maximum(np.asarray(self.var, dtype=np.float64), VAR_FLOOR)
        if self.mean.shape != self.var.shape:
            raise AnalysisError("mean and variance dimensions differ")


def fit_diag_gaussian(latents) -> DiagGaussian:
    Z = np.asarray(latents, dtype=np.float64)
    if Z.ndim != 2 or len(Z) < 2:
        raise AnalysisError("need at least two latent vectors")
    return DiagGaussian(Z.mean(axis=0), Z.var(axis=0, ddof=1))


def kl_diag_gaussian(p: DiagGaussian, q: DiagGaussian) -> float:
    """KL(p || q) for diagonal Gaussians."""
    if p.mean.shape != q.mean.shape:
        raise AnalysisError(f"dimension mismatch {p.mean.shape} vs {q.mean.shape}")
    terms = 0.5 * np.log(q.var / p.var) + (p.var + (p.mean - q.mean) ** 2) / (2 * q.var) - 0.5
    return float(np.sum(terms))


@dataclass
class DistributionReport:
    kl_test_vs_ori: float  # VAE-A: KL(P(z_test) || P(z_ori))
    kl_test_vs_aug: float  # VAE-B: KL(P(z_test) || P(z_aug))
    kl_ori_vs_test: float  # VAE-A: KL(P(z_ori) || P(z_test))
    kl_aug_vs_test: float  # VAE-B: KL(P(z_aug) || P(z_test))
    test_mean_abs_a: float = float("nan")
    test_mean_abs_b: float = float("nan")

    def values(self) -> list[float]:
        return [self.kl_test_vs_ori, self.kl_test_vs_aug, self.kl_ori_vs_test, self.kl_aug_vs_test]

    def summary(self) -> str:
        def cmp(a, b):
            return "<" if a < b else (">" if a > b else "=")

        return "\n".join(
            [
                f"KL(test||aug) [B] = {self.kl_test_vs_aug:.4f} {cmp(self.kl_test_vs_aug, self.kl_test_vs_ori)} "
                f"KL(test||ori) [A] = {self.kl_test_vs_ori:.4f}",
                f"KL(aug||test) [B] = {self.kl_aug_vs_test:.4f} {cmp(self.kl_aug_vs_test, self.kl_ori_vs_test)} "
                f"KL(ori||test) [A] = {self.kl_ori_vs_test:.4f}",
                f"mean |z_test| : A = {self.test_mean_abs_a:.4f}, B = {self.test_mean_abs_b:.4f}",
            ]
        )


def distribution_comparison(
    train_ori, train_aug, test, spec: VaeSpec | None = None, config: VaeTrainConfig | None = None
) -> DistributionReport:
    """Train VAE-A on ``train_ori`` and VAE-B on ``train_aug`` with identical settings, then compare latents."""
    spec = spec or VaeSpec()
    config = config or VaeTrainConfig()
    if not len(train_ori) or not len(train_aug) or not len(test):
        raise AnalysisError("all three image sets must be non-empty")
    ck_a, _ = train_vae(extract_patches(train_ori, spec.patch), spec, config)
    ck_b, _ = train_vae(extract_patches(train_aug, spec.patch), spec, config)
    vae_a, vae_b = VAE.from_checkpoint(ck_a), VAE.from_checkpoint(ck_b)
    z_ori, z_test_a = encode_latents(vae_a, train_ori), encode_latents(vae_a, test)
    z_aug, z_test_b = encode_latents(vae_b, train_aug), encode_latents(vae_b, test)
    g_ori, g_ta = fit_diag_gaussian(z_ori), fit_diag_gaussian(z_test_a)
    g_aug, g_tb = fit_diag_gaussian(z_aug), fit_diag_gaussian(z_test_b)
    return DistributionReport(
        kl_test_vs_ori=kl_diag_gaussian(g_ta, g_ori),
        kl_test_vs_aug=kl_diag_gaussian(g_tb, g_aug),
        kl_ori_vs_test=kl_diag_gaussian(g_ori, g_ta),
        kl_aug_vs_test=kl_diag_gaussian(g_aug, g_tb),
        test_mean_abs_a=float(np.mean(np.abs(z_test_a.mean(axis=0)))),
        test_mean_abs_b=float(np.mean(np.abs(z_test_b.mean(axis=0)))),
    )
