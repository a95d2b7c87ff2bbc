"""sRGB (D65) to CIELAB conversion used as the SLIC colour feature space."""

import numpy as np

# D65 reference white
_WHITE = np.array([0.95047, 1.0, 1.08883])
_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_DELTA = 6.0 / 29.0


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _lab_f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def to_lab(image: np.ndarray) -> np.ndarray:
    """Convert an ``(..., 3)`` sRGB image in [0, 1] to CIELAB.

    L lies in [0, 100]; a and b roughly in [-128, 127].
    """
    rgb = np.asarray(image, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError(f"to_lab expects 3 channels, got {rgb.shape[-1]}")
    xyz = _srgb_to_linear(rgb) @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / _WHITE)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def slic_features(image: np.ndarray) -> np.ndarray:
    """Feature vectors for clustering: CIELAB for RGB, value x 100 otherwise."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-1] == 3:
        return to_lab(img)
    return img * 100.0
