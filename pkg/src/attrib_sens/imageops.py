"""Image-space primitives shared by the attribution methods and metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


# ----------------------------------------------------------------------
# blur, resize, noise, jitter, masking


def gaussian_kernel(sigma):
    half = int(math.ceil(3 * sigma))
    t = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _reflect_index(n, half):
    """Indices of a length-n axis padded by ``half`` on each side (symmetric reflection)."""
    idx = np.arange(-half, n + half)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def gaussian_blur(image, radius):
    """Separable Gaussian blur with sigma = ``radius`` pixels over the two spatial axes.

    Kernel half-width is ceil(3 * radius); borders are handled by symmetric
    reflection (repeated as needed for kernels wider than the image).
    """
    if radius < 0:
        raise ValueError("blur radius must be non-negative")
    image = np.asarray(image)
    if radius == 0:
        return image.copy()
    k = gaussian_kernel(radius)
    half = len(k) // 2
    out = image.astype(np.float64)
    for axis in (0, 1):
        n = out.shape[axis]
        padded = np.take(out, _reflect_index(n, half), axis=axis)
        acc = np.zeros_like(out)
        for j, w in enumerate(k):
            acc += w * np.take(padded, np.arange(j, j + n), axis=axis)
        out = acc
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float64)


def interpolation_matrix(n_out, n_in):
    """Row-stochastic (n_out, n_in) matrix of corner-aligned linear interpolation."""
    if n_out < 1 or n_in < 1:
        raise ValueError("dimensions must be >= 1")
    R = np.zeros((n_out, n_in))
    if n_in == 1:
        R[:, 0] = 1.0
        return R
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    t = pos - i0
    R[np.arange(n_out), i0] = 1 - t
    R[np.arange(n_out), i0 + 1] += t
    return R


def bilinear_resize(array, new_dims):
    """Corner-aligned bilinear resize of a (h, w) or (h, w, c) array."""
    array = np.asarray(array)
    h_new, w_new = new_dims
    if h_new < 1 or w_new < 1:
        raise ValueError("target dims must be >= 1")
    h, w = array.shape[:2]
    if (h, w) == (h_new, w_new):
        return array.copy()
    Ry = interpolation_matrix(h_new, h)
    Rx = interpolation_matrix(w_new, w)
    out = np.einsum("ij,jk...->ik...", Ry, array.astype(np.float64))
    out = np.einsum("lk,ik...->il...", Rx, out)
    return out


def add_gaussian_noise(image, sigma, rng):
    """i.i.d. N(0, sigma^2) noise, no clipping."""
    image = np.asarray(image)
    if sigma == 0:
        return image.copy()
    return (image + rng.normal(0.0, sigma, size=image.shape)).astype(image.dtype)


def jitter_indices(n, shift):
    """Source indices for a translation by ``shift`` with symmetric reflection at the border."""
    src = np.arange(n) - shift
    src = np.mod(src, 2 * n)
    return np.where(src >= n, 2 * n - 1 - src, src)


def jitter(image, tau_x, tau_y):
    """Translate by ``tau_x`` columns and ``tau_y`` rows, reflecting at borders.

    ``out[r, c] = image[r - tau_y, c - tau_x]`` for interior pixels.
    """
    image = np.asarray(image)
    rows = jitter_indices(image.shape[0], int(tau_y))
    cols = jitter_indices(image.shape[1], int(tau_x))
    return image[rows][:, cols]


def apply_mask(image, mask, filler):
    """``image * (1 - mask) + filler * mask`` with a (d, d) mask broadcast over channels."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    filler = np.broadcast_to(np.asarray(filler, dtype=np.float64), image.shape)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if mask.size and (mask.min() < 0 or mask.max() > 1):
        raise ValueError("mask values must lie in [0, 1]")
    m = mask[..., None] if image.ndim == 3 else mask
    return image * (1 - m) + filler * m


# ----------------------------------------------------------------------
# SLIC


@dataclass
class SuperpixelSegmentation:
    labels: np.ndarray
    count: int


def rgb_to_lab(image):
    """sRGB in [0, 1] to CIE Lab (D65)."""
    rgb = np.asarray(image, dtype=np.float64)
    lin = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    M = np.array([[0.412453, 0.357580, 0.180423],
                  [0.212671, 0.715160, 0.072169],
                  [0.019334, 0.119193, 0.950227]])
    xyz = lin @ M.T / np.array([0.95047, 1.0, 1.08883])
    eps = 0.008856
    f = np.where(xyz > eps, np.cbrt(xyz), 7.787 * xyz + 16.0 / 116.0)
    L = np.where(xyz[..., 1] > eps, 116.0 * np.cbrt(xyz[..., 1]) - 16.0, 903.3 * xyz[..., 1])
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def _grid_centers(h, w, target):
    """Regular grid with roughly ``target`` cells; returns (rows, cols, step)."""
    step = math.sqrt(h * w / target)
    ny = max(1, int(round(h / step)))
    nx = max(1, int(round(w / step)))
    while ny * nx > target:
        if ny >= nx and ny > 1:
            ny -= 1
        elif nx > 1:
            nx -= 1
        else:
            break
    # grow the grid while it stays within target, keeping cells near square
    while True:
        options = [(abs(math.log((h / (ny + dy)) / (w / (nx + dx)))), dy, dx)
                   for dy, dx in ((0, 1), (1, 0)) if (ny + dy) * (nx + dx) <= target]
        if not options:
            break
        _, dy, dx = min(options)
        ny, nx = ny + dy, nx + dx
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    return cy.ravel(), cx.ravel(), max(h / ny, w / nx)


def slic(image, target_segments, compactness=10.0, seed=0, iterations=10):
    """k-means superpixels in (L, a, b, row, col) space.

    Centres start on a regular grid (nudged to the lowest-gradient pixel of a
    3x3 neighbourhood); each iteration assigns pixels within a 2S x 2S window
    of a centre.  Afterwards disconnected fragments are merged into their
    largest neighbouring segment and labels are renumbered 0..S'-1 in
    row-major order of first appearance.  ``seed`` is accepted for interface
    stability; the algorithm itself draws no random numbers.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if target_segments < 1:
        raise ValueError("target_segments must be >= 1")
    if target_segments > h * w:
        raise ValueError(f"target_segments {target_segments} exceeds pixel count {h * w}")
    if target_segments == 1:
        return SuperpixelSegmentation(np.zeros((h, w), dtype=np.int64), 1)
    lab = rgb_to_lab(image)
    cy, cx, step = _grid_centers(h, w, target_segments)

    # move seeds off edges
    grad = np.zeros((h, w))
    grad[1:-1, 1:-1] = (((lab[2:, 1:-1] - lab[:-2, 1:-1]) ** 2).sum(-1)
                        + ((lab[1:-1, 2:] - lab[1:-1, :-2]) ** 2).sum(-1))
    grad[0, :] = grad[-1, :] = grad[:, 0] = grad[:, -1] = np.inf
    for k in range(len(cy)):
        r0, c0 = int(cy[k]), int(cx[k])
        best = (np.inf, r0, c0)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = r0 + dr, c0 + dc
                if 0 <= r < h and 0 <= c < w and grad[r, c] < best[0]:
                    best = (grad[r, c], r, c)
        if np.isfinite(best[0]):
            cy[k], cx[k] = best[1], best[2]

    centers = np.column_stack([lab[cy.astype(int), cx.astype(int)], cy, cx])
    rows, cols = np.mgrid[0:h, 0:w]
    spatial_weight = (compactness / step) ** 2
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(iterations):
        dist = np.full((h, w), np.inf)
        for k, (L, A, B, y, x) in enumerate(centers):
            r0, r1 = max(0, int(y - step)), min(h, int(y + step) + 1)
            c0, c1 = max(0, int(x - step)), min(w, int(x + step) + 1)
            patch = lab[r0:r1, c0:c1]
            dc = ((patch - (L, A, B)) ** 2).sum(-1)
            ds = (rows[r0:r1, c0:c1] - y) ** 2 + (cols[r0:r1, c0:c1] - x) ** 2
            d = dc + ds * spatial_weight
            better = d < dist[r0:r1, c0:c1]
            dist[r0:r1, c0:c1][better] = d[better]
            labels[r0:r1, c0:c1][better] = k
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=len(centers))
        feats = np.column_stack([lab.reshape(-1, 3), rows.ravel(), cols.ravel()])
        sums = np.zeros_like(centers)
        for j in range(5):
            sums[:, j] = np.bincount(flat, weights=feats[:, j], minlength=len(centers))
        alive = counts > 0
        centers[alive] = sums[alive] / counts[alive, None]
    return SuperpixelSegmentation(*_enforce_connectivity(labels, step))


def _enforce_connectivity(labels, step):
    """Split labels into 4-connected components and merge small/orphan ones."""
    h, w = labels.shape
    comp = np.zeros_like(labels)
    n = 0
    for lab in np.unique(labels):
        cc, k = ndimage.label(labels == lab)
        comp[cc > 0] = cc[cc > 0] + n - 1
        n += k
    sizes = np.bincount(comp.ravel(), minlength=n)
    # keep, per original label, its largest component; everything else is an orphan
    keep = np.zeros(n, dtype=bool)
    owner = np.zeros(n, dtype=np.int64)
    flat_l, flat_c = labels.ravel(), comp.ravel()
    owner[flat_c] = flat_l
    for lab in np.unique(labels):
        members = np.flatnonzero(owner == lab)
        members = members[np.isin(members, flat_c)]
        if len(members):
            keep[members[np.argmax(sizes[members])]] = True
    min_size = max(1, int(step * step / 4))
    keep &= sizes >= min_size
    if not keep.any():
        keep[np.argmax(sizes)] = True
    # merge orphans into the neighbour sharing the longest border, repeatedly
    while not keep[comp].all():
        changed = False
        for c in np.flatnonzero(~keep & (sizes > 0)):
            region = comp == c
            ring = ndimage.binary_dilation(region) & ~region
            neigh = comp[ring]
            if neigh.size == 0:
                continue
            kept = neigh[keep[neigh]]
            pool = kept if kept.size else neigh
            counts = np.bincount(pool, minlength=n)
            # largest neighbour by size, ties broken by border length then id
            candidates = np.flatnonzero(counts)
            target = candidates[np.lexsort((-counts[candidates], -sizes[candidates]))[0]]
            comp[region] = target
            sizes[target] += sizes[c]
            sizes[c] = 0
            changed = True
        if not changed:
            break
    # renumber in row-major order of first appearance
    _, first = np.unique(comp.ravel(), return_index=True)
    order = np.argsort(first)
    remap = np.zeros(comp.max() + 1, dtype=np.int64)
    remap[np.unique(comp.ravel())[order]] = np.arange(len(order))
    out = remap[comp]
    return out, int(out.max()) + 1


# ----------------------------------------------------------------------
# HOG


def hog(array, cell_side=8, orientations=9, block_side=2, eps=1e-6):
    """Histogram of oriented gradients of a 2-D map.

    Central-difference gradients (zero at the border rows/columns), unsigned
    orientation in [0, 180), magnitude-weighted votes split linearly between
    the two nearest orientation bins (centres at multiples of 180/orientations), and L2 normalisation over
    ``block_side x block_side`` cell blocks with stride one cell.
    """
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("hog expects a 2-D map")
    gy = np.zeros_like(a)
    gx = np.zeros_like(a)
    gy[1:-1, :] = a[2:, :] - a[:-2, :]
    gx[:, 1:-1] = a[:, 2:] - a[:, :-2]
    hist = cell_histograms(gx, gy, cell_side, orientations)
    ncy, ncx = hist.shape[:2]
    by, bx = ncy - block_side + 1, ncx - block_side + 1
    if by < 1 or bx < 1:
        block = hist.reshape(-1)
        return block / np.sqrt((block ** 2).sum() + eps ** 2)
    feats = []
    for i in range(by):
        for j in range(bx):
            block = hist[i:i + block_side, j:j + block_side].reshape(-1)
            feats.append(block / np.sqrt((block ** 2).sum() + eps ** 2))
    return np.concatenate(feats)


def cell_histograms(gx, gy, cell_side, orientations):
    h, w = gx.shape
    ncy, ncx = h // cell_side, w // cell_side
    mag = np.hypot(gx, gy)
    ang = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    width = 180.0 / orientations
    # bin centres at k * width
    pos = ang / width
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    lo_bin = lo % orientations
    hi_bin = (lo + 1) % orientations
    hist = np.zeros((ncy, ncx, orientations))
    mag = mag[:ncy * cell_side, :ncx * cell_side]
    cell_r = (np.arange(ncy * cell_side) // cell_side)[:, None]
    cell_c = (np.arange(ncx * cell_side) // cell_side)[None, :]
    cell = np.broadcast_to(cell_r * ncx + cell_c, mag.shape).ravel()
    for bins, weight in ((lo_bin, 1 - frac), (hi_bin, frac)):
        b = bins[:ncy * cell_side, :ncx * cell_side].ravel()
        wts = (mag * weight[:ncy * cell_side, :ncx * cell_side]).ravel()
        hist += np.bincount(cell * orientations + b, weights=wts,
                            minlength=ncy * ncx * orientations).reshape(ncy, ncx, orientations)
    return hist
