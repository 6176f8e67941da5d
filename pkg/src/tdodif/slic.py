"""SLIC superpixels: localized k-means in joint CIELAB + image-plane space."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError

# sRGB (D65) -> XYZ
_RGB2XYZ = np.array([
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
])
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """Convert ``(H, W, 3)`` sRGB (uint8, or float in [0, 1]) to CIELAB under D65."""
    rgb = np.asarray(image)
    rgb = rgb.astype(np.float64) / 255.0 if rgb.dtype == np.uint8 else rgb.astype(np.float64)
    lin = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = lin @ _RGB2XYZ.T / _WHITE_D65
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


@dataclass(frozen=True)
class SlicParams:
    k: int = 500
    mc: float = 10.0
    iters: int = 10
    seed: int = 0  # kept for interface stability; grid seeding is deterministic

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}")
        if self.mc <= 0:
            raise ConfigError(f"M_c must be > 0, got {self.mc}")
        if self.iters < 1:
            raise ConfigError(f"iters must be >= 1, got {self.iters}")


@dataclass(eq=False)
class SuperpixelMap:
    """Superpixel partition of an image.

    ``assignment[y, x]`` is the superpixel id in ``0..S-1``; ``centers[i]`` is
    the ``(L, a, b, x, y)`` centroid of superpixel ``i``.  ``energy`` holds the
    k-means objective after each iteration (before connectivity enforcement).
    """

    assignment: np.ndarray
    centers: np.ndarray
    energy: list[float] = field(default_factory=list)

    @property
    def count(self) -> int:
        return int(self.centers.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return self.assignment.shape

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment.ravel(), minlength=self.count)

    @cached_property
    def members(self) -> list[np.ndarray]:
        """Per-superpixel ``(n, 2)`` arrays of ``(y, x)`` coordinates, row-major order."""
        flat = self.assignment.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.cumsum(self.sizes)[:-1]
        w = self.assignment.shape[1]
        return [np.stack(divmod(idx, w), axis=1) for idx in np.split(order, bounds)]


def slic_distance(pixel, center, mc: float, ms: float) -> float:
    """Squared normalised SLIC distance between two ``(L, a, b, x, y)`` points."""
    p = np.asarray(pixel, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    dc2 = float(np.sum((p[:3] - c[:3]) ** 2))
    ds2 = float(np.sum((p[3:5] - c[3:5]) ** 2))
    return dc2 / mc**2 + ds2 / ms**2


def _lab_gradient(lab: np.ndarray) -> np.ndarray:
    p = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return (gx**2).sum(-1) + (gy**2).sum(-1)


def _grid_seeds(lab: np.ndarray, k: int) -> np.ndarray:
    h, w = lab.shape[:2]
    step = np.sqrt(h * w / k)
    ny = int(min(h, max(1, round(h / step))))
    nx = int(min(w, max(1, round(k / ny))))
    ys = (np.arange(ny) + 0.5) * h / ny - 0.5
    xs = (np.arange(nx) + 0.5) * w / nx - 0.5
    grad = _lab_gradient(lab)
    seeds = []
    for y in ys:
        for x in xs:
            iy, ix = int(round(y)), int(round(x))
            best, by, bx = grad[iy, ix], y, x
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = iy + dy, ix + dx
                    if 0 <= yy < h and 0 <= xx < w and grad[yy, xx] < best:
                        best, by, bx = grad[yy, xx], float(yy), float(xx)
            py, px = int(round(by)), int(round(bx))
            seeds.append([*lab[py, px], bx, by])
    return np.array(seeds, dtype=np.float64)


def _point_distance(lab, xx, yy, centers, labels, mc, ms):
    c = centers[labels]
    dc2 = ((lab - c[..., :3]) ** 2).sum(-1)
    ds2 = (xx - c[..., 3]) ** 2 + (yy - c[..., 4]) ** 2
    return dc2 / mc**2 + ds2 / ms**2


def slic_kmeans(image: np.ndarray, params: SlicParams):
    """Run the localized k-means stage only.

    Returns ``(labels, centers, energy_history)`` with no connectivity
    enforcement applied.
    """
    lab = rgb_to_lab(image)
    h, w = lab.shape[:2]
    if h < 2 or w < 2:
        raise ConfigError(f"image must be at least 2x2, got {w}x{h}")
    if params.k > h * w:
        raise ConfigError(f"K={params.k} exceeds the pixel count {h * w}")
    ms = float(np.sqrt(h * w / params.k))
    mc = float(params.mc)
    centers = _grid_seeds(lab, params.k)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.full((h, w), -1, dtype=np.int64)
    dist = np.full((h, w), np.inf)
    energy = []
    for it in range(params.iters):
        if it > 0:
            # the current center is always a candidate, so assignment never raises the energy
            dist = _point_distance(lab, xx, yy, centers, labels, mc, ms)
        for i, (L, a, b, cx, cy) in enumerate(centers):
            y0, y1 = max(0, int(np.floor(cy - ms))), min(h, int(np.ceil(cy + ms)) + 1)
            x0, x1 = max(0, int(np.floor(cx - ms))), min(w, int(np.ceil(cx + ms)) + 1)
            if y0 >= y1 or x0 >= x1:
                continue
            sub = lab[y0:y1, x0:x1]
            d = (((sub[..., 0] - L) ** 2 + (sub[..., 1] - a) ** 2 + (sub[..., 2] - b) ** 2) / mc**2
                 + ((xx[y0:y1, x0:x1] - cx) ** 2 + (yy[y0:y1, x0:x1] - cy) ** 2) / ms**2)
            better = d < dist[y0:y1, x0:x1]
            dist[y0:y1, x0:x1][better] = d[better]
            labels[y0:y1, x0:x1][better] = i
        orphan = labels < 0
        if orphan.any():
            oy, ox = np.nonzero(orphan)
            pts = np.concatenate([lab[oy, ox], ox[:, None], oy[:, None]], axis=1)
            full = (((pts[:, None, :3] - centers[None, :, :3]) ** 2).sum(-1) / mc**2
                    + ((pts[:, None, 3:] - centers[None, :, 3:]) ** 2).sum(-1) / ms**2)
            labels[oy, ox] = np.argmin(full, axis=1)
        flat = labels.ravel()
        n = len(centers)
        counts = np.bincount(flat, minlength=n)
        feats = np.concatenate([lab.reshape(-1, 3), xx.reshape(-1, 1), yy.reshape(-1, 1)], axis=1)
        sums = np.stack([np.bincount(flat, weights=feats[:, j], minlength=n) for j in range(5)], axis=1)
        nonempty = counts > 0
        centers = centers.copy()
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        energy.append(float(_point_distance(lab, xx, yy, centers, labels, mc, ms).sum()))
    return labels, centers, energy


def _components(labels: np.ndarray):
    """4-connected components of equal-label regions, numbered in raster order of first pixel."""
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    right = labels[:, :-1] == labels[:, 1:]
    down = labels[:-1, :] == labels[1:, :]
    rows = np.concatenate([idx[:, :-1][right], idx[:-1, :][down]])
    cols = np.concatenate([idx[:, 1:][right], idx[1:, :][down]])
    g = sparse.coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(h * w, h * w))
    n, comp = connected_components(g, directed=False)
    # renumber by first occurrence so the result does not depend on solver internals
    _, first = np.unique(comp, return_index=True)
    rank = np.empty(n, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(n)
    return n, rank[comp].reshape(h, w)


def enforce_connectivity(labels: np.ndarray, min_size: float) -> np.ndarray:
    """Make every region 4-connected; components below ``min_size`` pixels join
    their largest neighbour.  Output ids are compact, ordered by first pixel."""
    n, comp = _components(labels)
    sizes = np.bincount(comp.ravel(), minlength=n).astype(np.int64)
    a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
    b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
    diff = a != b
    keys = np.unique(np.minimum(a[diff], b[diff]) * n + np.maximum(a[diff], b[diff]))
    adj: list[set[int]] = [set() for _ in range(n)]
    for u, v in zip(*(x.tolist() for x in np.divmod(keys, n))):
        adj[u].add(v)
        adj[v].add(u)

    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    heap = [(int(sizes[c]), c) for c in range(n) if sizes[c] < min_size]
    heapq.heapify(heap)
    while heap:
        size, c = heapq.heappop(heap)
        r = find(c)
        if r != c or sizes[r] != size or sizes[r] >= min_size:
            continue
        nbrs = {find(x) for x in adj[r]} - {r}
        if not nbrs:
            continue
        target = min(nbrs, key=lambda t: (-sizes[t], t))
        parent[r] = target
        sizes[target] += sizes[r]
        adj[target] |= adj[r]
        adj[r] = set()
        if sizes[target] < min_size:
            heapq.heappush(heap, (int(sizes[target]), target))

    roots = np.array([find(c) for c in range(n)], dtype=np.int64)
    merged = roots[comp]
    _, first = np.unique(merged.ravel(), return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(merged.max() + 1, dtype=np.int64)
    remap[np.unique(merged)[order]] = np.arange(len(order))
    return remap[merged].astype(np.int32)


def compute_centers(image: np.ndarray | None, assignment: np.ndarray, lab: np.ndarray | None = None) -> np.ndarray:
    h, w = assignment.shape
    n = int(assignment.max()) + 1
    flat = assignment.ravel()
    counts = np.maximum(np.bincount(flat, minlength=n), 1)
    yy, xx = np.mgrid[0:h, 0:w]
    cols = []
    if lab is None and image is not None:
        lab = rgb_to_lab(image)
    if lab is not None:
        cols += [np.bincount(flat, weights=lab[..., j].ravel(), minlength=n) for j in range(3)]
    else:
        cols += [np.zeros(n)] * 3
    cols += [np.bincount(flat, weights=xx.ravel().astype(float), minlength=n),
             np.bincount(flat, weights=yy.ravel().astype(float), minlength=n)]
    out = np.stack(cols, axis=1)
    out[:, 3:] /= counts[:, None]
    if lab is not None:
        out[:, :3] /= counts[:, None]
    return out


def slic_segment(image: np.ndarray, params: SlicParams) -> SuperpixelMap:
    """Segment an ``(H, W, 3)`` RGB image into roughly ``params.k`` superpixels."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigError(f"expected an (H, W, 3) RGB image, got shape {image.shape}")
    labels, _, energy = slic_kmeans(image, params)
    h, w = labels.shape
    assignment = enforce_connectivity(labels, (h * w / params.k) / 4.0)
    centers = compute_centers(image, assignment)
    return SuperpixelMap(assignment, centers, energy)


def from_assignment(assignment: np.ndarray, image: np.ndarray | None = None) -> SuperpixelMap:
    """Wrap an existing id raster (ids compacted to ``0..S-1`` in sorted order)."""
    a = np.asarray(assignment)
    uniq, inv = np.unique(a, return_inverse=True)
    a = inv.reshape(a.shape).astype(np.int32)
    return SuperpixelMap(a, compute_centers(image, a))


def downsample_superpixels(sp: SuperpixelMap, fw: int, fh: int) -> SuperpixelMap:
    """Majority-vote a superpixel map down to ``fh x fw`` cells.

    Cell ``j`` covers ``[j*b, (j+1)*b)`` with ``b = W // fw``; the last cell
    also takes the remainder.  Ties go to the lowest id.  Surviving ids keep
    their relative order and are compacted.
    """
    h, w = sp.shape
    if not (1 <= fw <= w and 1 <= fh <= h):
        raise ConfigError(f"target size {fw}x{fh} must be within 1..{w}x1..{h}")
    if (fw, fh) == (w, h):
        return SuperpixelMap(sp.assignment.copy(), sp.centers.copy())
    bw, bh = w // fw, h // fh
    cx = np.minimum(np.arange(w) // bw, fw - 1)
    cy = np.minimum(np.arange(h) // bh, fh - 1)
    cell = (cy[:, None] * fw + cx[None, :]).ravel()
    n = sp.count
    keys, counts = np.unique(cell.astype(np.int64) * n + sp.assignment.ravel(), return_counts=True)
    kcell, kid = np.divmod(keys, n)
    # per cell: highest count first, then lowest id
    order = np.lexsort((kid, -counts, kcell))
    first = np.ones(len(order), dtype=bool)
    first[1:] = kcell[order][1:] != kcell[order][:-1]
    low = np.empty(fw * fh, dtype=np.int64)
    low[kcell[order][first]] = kid[order][first]
    low = low.reshape(fh, fw)
    keep = np.unique(low)
    remap = np.full(n, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    out = remap[low].astype(np.int32)
    centers = compute_centers(None, out)
    centers[:, :3] = sp.centers[keep, :3]
    return SuperpixelMap(out, centers)


def format_centers(sp: SuperpixelMap) -> str:
    lines = ["# id L a b x y size"]
    for i, (c, s) in enumerate(zip(sp.centers, sp.sizes)):
        lines.append(f"{i} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f} {c[3]:.6f} {c[4]:.6f} {int(s)}")
    return "\n".join(lines) + "\n"
