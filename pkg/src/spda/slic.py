"""SLIC superpixels (2D) and supervoxels (3D).

Localized k-means over joint (feature, position) space.  The distance between
pixel ``i`` and center ``k`` is

    D^2 = |f_i - f_k|^2 + (|p_i - p_k| / S)^2 * m^2

with ``S`` the nominal grid spacing and ``m`` the compactness.  Each center
only competes for pixels inside its local window, so every assignment depends
on local image content alone.

Cell maps are plain integer arrays over the spatial extents, with ids
``0 .. num_cells - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from skimage.measure import label as _cc_label

from .color import slic_features
from .core import as_tensor


class SlicError(ValueError):
    pass


@dataclass(frozen=True)
class SlicParams:
    s: int
    compactness: float = 20.0
    max_iters: int = 10
    min_cell_fraction: float = 0.25
    enforce_connectivity: bool = True

    def validate(self, num_pixels: int | None = None) -> None:
        if self.s < 1:
            raise SlicError(f"s must be >= 1, got {self.s}")
        if num_pixels is not None and self.s > num_pixels:
            raise SlicError(f"s={self.s} exceeds pixel count {num_pixels}")
        if not self.compactness > 0:
            raise SlicError("compactness must be positive")
        if self.max_iters < 1:
            raise SlicError("max_iters must be positive")
        if not 0 < self.min_cell_fraction < 1:
            raise SlicError("min_cell_fraction must lie in (0, 1)")

    def with_s(self, s: int) -> "SlicParams":
        return replace(self, s=int(s))


@dataclass
class SlicResult:
    labels: np.ndarray
    centers: np.ndarray  # (K, ndim + nfeat): spatial coords then features
    counts: np.ndarray
    objective: list[float]  # sum of D^2 after every assignment and every update


def grid_candidates(shape: tuple[int, ...], s: int) -> list[tuple[int, ...]]:
    """Grid layouts (centers per axis) whose product is closest to ``s``, most isotropic first.

    Several layouts can tie exactly (e.g. 1x2 and 2x1); all of them are returned
    in enumeration order.
    """
    scored = []
    if len(shape) == 2:
        H, W = shape
        for ny in range(1, H + 1):
            nx = int(min(max(round(s / ny), 1), W))
            steps = (H / ny, W / nx)
            scored.append(((abs(ny * nx - s), max(steps) / min(steps)), (ny, nx)))
    elif len(shape) == 3:
        D, H, W = shape
        for nz in range(1, min(D, s) + 1):
            for ny in range(1, H + 1):
                if nz * ny > s:
                    break
                nx = int(min(max(round(s / (nz * ny)), 1), W))
                steps = (D / nz, H / ny, W / nx)
                scored.append(((abs(nz * ny * nx - s), max(steps) / min(steps)), (nz, ny, nx)))
    else:
        raise SlicError(f"unsupported spatial rank {len(shape)}")
    best = min(key for key, _ in scored)
    out = []
    for key, g in scored:
        if key == best and g not in out:
            out.append(g)
    return out


def grid_shape(shape: tuple[int, ...], s: int) -> tuple[int, ...]:
    return grid_candidates(shape, s)[0]


def _gradient_magnitude(feat: np.ndarray) -> np.ndarray:
    nd = feat.ndim - 1
    padded = np.pad(feat, [(1, 1)] * nd + [(0, 0)], mode="edge")
    g = np.zeros(feat.shape[:-1])
    for ax in range(nd):
        hi = [slice(1, -1)] * nd
        lo = [slice(1, -1)] * nd
        hi[ax] = slice(2, None)
        lo[ax] = slice(None, -2)
        d = padded[tuple(hi)] - padded[tuple(lo)]
        g += np.sum(d * d, axis=-1)
    return g


def _grid_centers(feat: np.ndarray, grad: np.ndarray, counts: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    shape = feat.shape[:-1]
    steps = np.array([n / c for n, c in zip(shape, counts)])
    axes = [(np.arange(c) + 0.5) * st - 0.5 for c, st in zip(counts, steps)]
    pos = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(shape))
    shape_arr = np.array(shape)
    centers = np.empty((len(pos), len(shape) + feat.shape[-1]))
    for k, p in enumerate(pos):
        r = np.clip(np.floor(p + 0.5).astype(int), 0, shape_arr - 1)
        lo = np.maximum(r - 1, 0)
        hi = np.minimum(r + 2, shape_arr)
        win = grad[tuple(slice(a, b) for a, b in zip(lo, hi))]
        j = np.unravel_index(np.argmin(win), win.shape)
        cand = lo + np.array(j)
        if win[j] < grad[tuple(r)]:
            p, r = cand.astype(float), cand
        centers[k, : len(shape)] = p
        centers[k, len(shape):] = feat[tuple(r)]
    return centers, steps


def init_centers(feat: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Grid-initialized centers nudged to the lowest gradient in their 3^d neighborhood.

    When several grid layouts fit ``s`` equally well, the one whose initial
    centers spread widest in feature space wins (first layout on exact ties).
    Returns ``(centers, steps)`` where ``steps`` is the per-axis grid spacing.
    """
    grad = _gradient_magnitude(feat)
    nd = feat.ndim - 1
    best, best_spread = None, -1.0
    for counts in grid_candidates(feat.shape[:-1], s):
        centers, steps = _grid_centers(feat, grad, counts)
        spread = float(np.sum(np.var(centers[:, nd:], axis=0)))
        if spread > best_spread:
            best, best_spread = (centers, steps), spread
    return best


def _assign(flat_feat, shape, centers, half, spatial_w, labels, best) -> None:
    """One assignment sweep over all center windows, in place.

    Each pixel ends at the lexicographic minimum of ``(distance, center index)``
    over its current ``(best, label)`` and every center whose window covers it.
    """
    nd = len(shape)
    K = len(centers)
    strides = np.cumprod((shape[1:] + (1,))[::-1])[::-1]
    lo = np.maximum(np.floor(centers[:, :nd] - half).astype(np.int64), 0)
    hi = np.minimum(np.ceil(centers[:, :nd] + half).astype(np.int64) + 1, np.array(shape))
    # per-axis coordinates of a box big enough for every window, broadcast to (K, E0, E1[, E2])
    flat_idx = np.zeros((K,) + (1,) * nd, dtype=np.int64)
    sp = np.zeros((K,) + (1,) * nd)
    valid = np.ones((K,) + (1,) * nd, dtype=bool)
    for ax in range(nd):
        a = lo[:, ax, None] + np.arange(int(np.ceil(2 * half[ax])) + 2)[None]
        delta = a - centers[:, ax, None]
        bshape = [K] + [1] * nd
        bshape[ax + 1] = a.shape[1]
        sp = sp + (delta * delta).reshape(bshape)
        valid = valid & (a < hi[:, ax, None]).reshape(bshape)
        flat_idx = flat_idx + (a * strides[ax]).reshape(bshape)
    kk = np.broadcast_to(np.arange(K).reshape((K,) + (1,) * nd), valid.shape)[valid]
    pix = np.broadcast_to(flat_idx, valid.shape)[valid]
    sp = np.broadcast_to(sp, valid.shape)[valid]

    if flat_feat.shape[1] == 1:
        df = flat_feat[pix, 0] - centers[kk, nd]
        d = df * df
    else:
        df = flat_feat[pix] - centers[kk, nd:]
        d = np.sum(df * df, axis=-1)
    d = d + spatial_w * sp

    dmin = best.copy()
    np.minimum.at(dmin, pix, d)
    tie = d == dmin[pix]
    big = np.iinfo(np.int64).max
    kmin = np.where(best == dmin, labels, big)
    np.minimum.at(kmin, pix[tie], kk[tie])
    changed = (kmin != labels) & (kmin != big)
    labels[changed] = kmin[changed]
    best[:] = dmin


def slic_cluster(image: np.ndarray, params: SlicParams) -> SlicResult:
    """Run the SLIC assignment/update iterations without connectivity enforcement."""
    img = as_tensor(image)
    shape = img.shape[:-1]
    nd = len(shape)
    params.validate(int(np.prod(shape)))
    feat = slic_features(img)
    N = int(np.prod(shape))
    S = (N / params.s) ** (1.0 / nd)
    spatial_w = (params.compactness / S) ** 2

    centers, steps = init_centers(feat, params.s)
    K = len(centers)
    half = np.maximum(steps, 2.0)
    coords = [np.arange(n, dtype=np.float64) for n in shape]
    flat_feat = feat.reshape(N, -1)
    grid_pos = np.stack(np.meshgrid(*coords, indexing="ij"), axis=-1).reshape(N, nd)

    labels = np.full(shape, -1, dtype=np.int64)
    best = np.full(shape, np.inf)
    objective: list[float] = []
    counts = np.zeros(K, dtype=np.int64)

    for _it in range(params.max_iters):
        if _it > 0:
            # every pixel starts from its distance to its own (updated) center
            lf = labels.reshape(-1)
            c = centers[lf]
            dp = grid_pos - c[:, :nd]
            df = flat_feat - c[:, nd:]
            best = (np.sum(df * df, axis=1) + spatial_w * np.sum(dp * dp, axis=1)).reshape(shape)

        _assign(flat_feat, shape, centers, half, spatial_w, labels.reshape(-1), best.reshape(-1))
        objective.append(float(best.sum()))

        lf = labels.reshape(-1)
        counts = np.bincount(lf, minlength=K)
        nz = counts > 0
        new = np.empty_like(centers)
        for j in range(nd):
            new[:, j] = np.bincount(lf, weights=grid_pos[:, j], minlength=K)
        for j in range(flat_feat.shape[1]):
            new[:, nd + j] = np.bincount(lf, weights=flat_feat[:, j], minlength=K)
        centers[nz] = new[nz] / counts[nz, None]

        c = centers[lf]
        dp = grid_pos - c[:, :nd]
        df = flat_feat - c[:, nd:]
        objective.append(float(np.sum(df * df) + spatial_w * np.sum(dp * dp)))

    return SlicResult(labels, centers, counts, objective)


def enforce_connectivity(cells: np.ndarray, params: SlicParams | None = None, min_size: float | None = None) -> np.ndarray:
    """Split cells into connected components and merge small fragments.

    Components smaller than ``min_cell_fraction * N / s`` are merged, smallest
    first, into their largest adjacent region.  Connectivity is 4-neighbour in
    2D and 6-neighbour in 3D.  Output ids are compact and numbered in raster
    order of first appearance.
    """
    cells = np.asarray(cells)
    nd = cells.ndim
    N = cells.size
    if min_size is None:
        min_size = 0.0 if params is None else params.min_cell_fraction * N / params.s
    comp = _cc_label(cells.astype(np.int64) + 1, background=0, connectivity=1) - 1
    ncomp = int(comp.max()) + 1
    sizes = np.bincount(comp.reshape(-1), minlength=ncomp).astype(np.int64)

    if ncomp > 1 and min_size > 0 and (sizes < min_size).any():
        pairs = []
        for ax in range(nd):
            a = np.moveaxis(comp, ax, 0)
            u, v = a[:-1].reshape(-1), a[1:].reshape(-1)
            m = u != v
            pairs.append(np.stack([u[m], v[m]], axis=1))
        pairs = np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)
        pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        adj: list[set[int]] = [set() for _ in range(ncomp)]
        for u, v in pairs:
            adj[u].add(int(v))
            adj[v].add(int(u))

        parent = np.arange(ncomp)

        def find(x: int) -> int:
            root = x
            while parent[root] != root:
                root = parent[root]
            while parent[x] != root:
                parent[x], x = root, parent[x]
            return root

        size = sizes.copy()
        for c in np.lexsort((np.arange(ncomp), sizes)):
            r = find(int(c))
            if size[r] >= min_size:
                continue
            neigh = {find(n) for n in adj[r]} - {r}
            if not neigh:
                continue
            target = min(neigh, key=lambda q: (-size[q], q))
            parent[r] = target
            size[target] += size[r]
            adj[target] |= adj[r]
            adj[r] = set()
        roots = np.array([find(i) for i in range(ncomp)])
        comp = roots[comp]

    flat = comp.reshape(-1)
    uniq, first = np.unique(flat, return_index=True)
    order = np.argsort(first)
    remap = np.empty(int(uniq.max()) + 1, dtype=np.int64)
    remap[uniq[order]] = np.arange(len(uniq))
    return remap[comp]


def _segment(image, params: SlicParams, ndim: int) -> np.ndarray:
    img = as_tensor(image)
    if img.ndim != ndim + 1:
        raise SlicError(f"expected a {ndim}D image, got shape {img.shape}")
    params.validate(int(np.prod(img.shape[:-1])))
    res = slic_cluster(img, params)
    if params.enforce_connectivity:
        return enforce_connectivity(res.labels, params)
    return enforce_connectivity(res.labels, min_size=0)


def slic_segment(image: np.ndarray, params: SlicParams) -> np.ndarray:
    """Superpixel cell map of a 2D ``(H, W, C)`` image."""
    return _segment(image, params, 2)


def slic_segment_3d(volume: np.ndarray, params: SlicParams) -> np.ndarray:
    """Supervoxel cell map of a 3D ``(D, H, W, C)`` volume (isotropic voxel spacing)."""
    return _segment(volume, params, 3)


def segment(image: np.ndarray, params: SlicParams) -> np.ndarray:
    img = as_tensor(image)
    return slic_segment_3d(img, params) if img.ndim == 4 else slic_segment(img, params)


def boundary_mask(cells: np.ndarray) -> np.ndarray:
    """Pixels with at least one differing 4-neighbour (6-neighbour in 3D)."""
    cells = np.asarray(cells)
    out = np.zeros(cells.shape, dtype=bool)
    for ax in range(cells.ndim):
        a = np.moveaxis(cells, ax, 0)
        o = np.moveaxis(out, ax, 0)
        d = a[1:] != a[:-1]
        o[1:] |= d
        o[:-1] |= d
    return out


def boundary_overlay(image: np.ndarray, cells: np.ndarray, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """RGB copy of a 2D image with cell boundaries painted in ``color``."""
    img = as_tensor(image)
    rgb = np.repeat(img, 3, axis=-1) if img.shape[-1] == 1 else img[..., :3].copy()
    rgb[boundary_mask(cells)] = color
    return rgb
