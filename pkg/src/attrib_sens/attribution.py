"""Attribution methods: (model, image, target class, method spec) -> attribution map.

Gradient-family methods (Gradient, GradientInput, GuidedBackprop, SmoothGrad,
IntegratedGradients) reduce the (d, d, 3) gradient tensor to a (d, d) map by
summing channels and divide by the maximum absolute value.  SlidingPatch
keeps its native probability-difference range; MeaningfulPerturbation
returns its [0, 1] deletion mask unchanged.

Sliding patch and LIME only call ``model.probabilities``.  Meaningful
perturbation additionally needs ``model.probability_gradients`` to optimise
its mask.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import imageops
from .seeding import rng_for

SIGNED_UNIT = "signed_unit"
MASK_UNIT = "mask_unit"
GRAD_BATCH = 64


class AttributionError(RuntimeError):
    pass


@dataclass
class AttributionMap:
    values: np.ndarray
    range_tag: str = SIGNED_UNIT


# ----------------------------------------------------------------------
# method specs


@dataclass(frozen=True)
class Gradient:
    pass


@dataclass(frozen=True)
class GradientInput:
    pass


@dataclass(frozen=True)
class GuidedBackprop:
    pass


@dataclass(frozen=True)
class SmoothGrad:
    n_samples: int = 50
    sigma: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("SmoothGrad.n_samples must be >= 1")
        if self.sigma < 0:
            raise ValueError("SmoothGrad.sigma must be >= 0")


@dataclass(frozen=True)
class IntegratedGradients:
    """``baseline`` is ``zero``, ``mean`` (dataset mean colour) or ``random``
    (a fresh uniform [0, 1] image per trial)."""

    n_steps: int = 100
    n_trials: int = 1
    baseline: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1 or self.n_trials < 1:
            raise ValueError("IntegratedGradients.n_steps and n_trials must be >= 1")
        if self.baseline not in ("zero", "mean", "random"):
            raise ValueError(f"unknown baseline {self.baseline!r}")


@dataclass(frozen=True)
class SlidingPatch:
    patch: int = 29
    stride: int = 3
    filler: str = "mean"

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError("SlidingPatch.patch must be >= 1")
        if self.stride < 1:
            raise ValueError("SlidingPatch.stride must be >= 1")
        if self.filler not in ("zero", "mean"):
            raise ValueError(f"unknown filler {self.filler!r}")


@dataclass(frozen=True)
class Lime:
    n_segments: int = 50
    n_samples: int = 500
    seed: int = 0
    kernel_width: float = 0.25
    ridge_lambda: float = 1e-3
    compactness: float = 10.0
    filler: str = "mean"

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("Lime.n_segments must be >= 1")
        if self.n_samples < 2:
            raise ValueError("Lime.n_samples must be >= 2")
        if self.kernel_width <= 0 or self.ridge_lambda < 0:
            raise ValueError("Lime.kernel_width must be > 0 and ridge_lambda >= 0")


@dataclass(frozen=True)
class MeaningfulPerturbation:
    blur_radius: float = 10.0
    n_iter: int = 300
    l1_coeff: float = 1e-2
    tv_coeff: float = 1e-1
    mask_side: int = 16
    jitter: int = 2
    learning_rate: float = 0.1
    init: str = "circular"
    seed: int = 0

    def __post_init__(self):
        if self.n_iter < 1 or self.mask_side < 1:
            raise ValueError("MeaningfulPerturbation.n_iter and mask_side must be >= 1")
        if self.blur_radius < 0 or self.l1_coeff < 0 or self.tv_coeff < 0 or self.jitter < 0:
            raise ValueError("MeaningfulPerturbation blur_radius, coefficients and jitter must be >= 0")
        if self.init not in ("circular", "random"):
            raise ValueError(f"unknown init {self.init!r}")


METHODS = {cls.__name__: cls for cls in (Gradient, GradientInput, GuidedBackprop, SmoothGrad,
                                          IntegratedGradients, SlidingPatch, Lime,
                                          MeaningfulPerturbation)}
GRADIENT_FAMILY = (Gradient, GradientInput, GuidedBackprop, SmoothGrad, IntegratedGradients)


def parse_method(obj):
    """``{"SmoothGrad": {"n_samples": 50}}`` -> ``SmoothGrad(n_samples=50)``."""
    if isinstance(obj, str):
        obj = {obj: {}}
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ValueError("method spec must be an object with exactly one method name key")
    (name, params), = obj.items()
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {sorted(METHODS)}")
    cls = METHODS[name]
    params = dict(params or {})
    known = {f.name for f in fields(cls)}
    extra = sorted(set(params) - known)
    if extra:
        raise ValueError(f"{name}: unknown field(s) {extra}; expected a subset of {sorted(known)}")
    return cls(**params)


def method_to_json(spec):
    return {type(spec).__name__: asdict(spec)}


def method_name(spec):
    return type(spec).__name__


# ----------------------------------------------------------------------
# normalisation


def normalize(raw, method):
    raw = np.asarray(raw, dtype=np.float64)
    cls = method if isinstance(method, type) else type(method)
    if cls is MeaningfulPerturbation:
        return AttributionMap(raw, MASK_UNIT)
    if cls is SlidingPatch:
        return AttributionMap(np.clip(raw, -1.0, 1.0), SIGNED_UNIT)
    peak = np.abs(raw).max() if raw.size else 0.0
    return AttributionMap(raw / peak if peak > 0 else np.zeros_like(raw), SIGNED_UNIT)


def _channel_sum(t):
    return np.asarray(t, dtype=np.float64).sum(axis=-1)


def _check_image(model, image):
    image = np.asarray(image)
    d = model.input_side
    if image.shape != (d, d, 3):
        raise ValueError(f"image shape {image.shape} does not match model input ({d}, {d}, 3)")
    return image


def _batched_gradients(model, images, target_class, guided=False):
    out = []
    for lo in range(0, len(images), GRAD_BATCH):
        out.append(model.input_gradients(images[lo:lo + GRAD_BATCH], target_class, guided=guided)
                   .astype(np.float64))
    return np.concatenate(out)


def _batched_probabilities(model, images, batch=128):
    return np.concatenate([np.asarray(model.probabilities(images[lo:lo + batch]), dtype=np.float64)
                           for lo in range(0, len(images), batch)])


def _filler_color(model, filler):
    if filler == "zero":
        return np.zeros(3)
    return np.asarray(getattr(model, "input_mean", np.full(3, 0.5)), dtype=np.float64)


# ----------------------------------------------------------------------
# gradient family


def gradient_raw(model, image, target_class):
    image = _check_image(model, image)
    return _batched_gradients(model, image[None], target_class)[0]


def attribute_gradient(model, image, target_class):
    return normalize(_channel_sum(gradient_raw(model, image, target_class)), Gradient)


def attribute_gi(model, image, target_class):
    image = _check_image(model, image)
    raw = image.astype(np.float64) * gradient_raw(model, image, target_class)
    return normalize(_channel_sum(raw), GradientInput)


def attribute_guided(model, image, target_class):
    image = _check_image(model, image)
    raw = _batched_gradients(model, image[None], target_class, guided=True)[0]
    return normalize(_channel_sum(raw), GuidedBackprop)


def smoothgrad_noise(image, spec):
    rng = rng_for(spec.seed, 0, 0, "smoothgrad")
    return rng.normal(0.0, 1.0, size=(spec.n_samples,) + image.shape) * spec.sigma


def smoothgrad_raw(model, image, target_class, spec):
    image = _check_image(model, image)
    if spec.sigma == 0:
        noisy = np.repeat(image[None], spec.n_samples, axis=0)
    else:
        noisy = image[None] + smoothgrad_noise(image, spec)
    return _batched_gradients(model, noisy, target_class).mean(axis=0)


def attribute_smoothgrad(model, image, target_class, spec):
    return normalize(_channel_sum(smoothgrad_raw(model, image, target_class, spec)), SmoothGrad)


def ig_baseline(model, image, spec, trial):
    if spec.baseline == "zero":
        return np.zeros_like(image, dtype=np.float64)
    if spec.baseline == "mean":
        return np.broadcast_to(_filler_color(model, "mean"), image.shape).astype(np.float64)
    return rng_for(spec.seed, trial, 0, "ig-baseline").uniform(0.0, 1.0, size=image.shape)


def ig_raw(model, image, target_class, spec):
    """Per-pixel, per-channel integrated gradients, midpoint rule, averaged over trials."""
    image = _check_image(model, image).astype(np.float64)
    alphas = (np.arange(spec.n_steps) + 0.5) / spec.n_steps
    total = np.zeros_like(image)
    for trial in range(spec.n_trials):
        base = ig_baseline(model, image, spec, trial)
        diff = image - base
        path = base[None] + alphas[:, None, None, None] * diff[None]
        total += diff * _batched_gradients(model, path, target_class).mean(axis=0)
    return total / spec.n_trials


def attribute_ig(model, image, target_class, spec):
    return normalize(_channel_sum(ig_raw(model, image, target_class, spec)), IntegratedGradients)


# ----------------------------------------------------------------------
# sliding patch


def sliding_patch_grid_side(d, patch, stride):
    return math.floor((d - patch) / stride + 1)


def sliding_patch_coarse(model, image, target_class, spec):
    """(d', d') grid of f(x) - f(x with patch (i, j) filled)."""
    image = _check_image(model, image)
    d = image.shape[0]
    if spec.patch > d:
        raise ValueError(f"patch {spec.patch} larger than image side {d}")
    side = sliding_patch_grid_side(d, spec.patch, spec.stride)
    filler = _filler_color(model, spec.filler).astype(image.dtype)
    base = float(_batched_probabilities(model, image[None])[0, target_class])
    occluded = np.repeat(image[None], side * side, axis=0)
    for i in range(side):
        for j in range(side):
            r, c = i * spec.stride, j * spec.stride
            occluded[i * side + j, r:r + spec.patch, c:c + spec.patch, :] = filler
    scores = _batched_probabilities(model, occluded)[:, target_class]
    return (base - scores).reshape(side, side)


def attribute_sliding_patch(model, image, target_class, spec):
    coarse = sliding_patch_coarse(model, image, target_class, spec)
    d = model.input_side
    return normalize(imageops.bilinear_resize(coarse, (d, d)), SlidingPatch)


# ----------------------------------------------------------------------
# LIME


def lime_masks(n_superpixels, spec):
    rng = rng_for(spec.seed, 0, 0, "lime-masks")
    return (rng.uniform(size=(spec.n_samples, n_superpixels)) < 0.5).astype(np.float64)


def lime_scores(model, image, labels, masks, target_class, filler_color):
    """Class probability of each image whose superpixels with mask 0 are filled."""
    image = _check_image(model, image)
    masks = np.asarray(masks)
    out = []
    for lo in range(0, len(masks), 128):
        chunk = masks[lo:lo + 128]
        # pixel keep-map for every sample: (n, d, d)
        keep = chunk[:, labels]
        imgs = image[None] * keep[..., None] + filler_color * (1 - keep[..., None])
        out.append(np.asarray(model.probabilities(imgs.astype(image.dtype)), dtype=np.float64)[:, target_class])
    return np.concatenate(out)


def lime_weights(masks, kernel_width):
    distance = 1.0 - np.asarray(masks).mean(axis=1)   # normalised Hamming distance to all-ones
    return np.exp(-distance ** 2 / kernel_width ** 2)


def weighted_ridge(X, y, weights, ridge_lambda):
    """Weighted ridge regression with an unpenalised intercept; returns (coef, intercept)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if np.all(y == y[0]):
        # constant response: avoid rounding noise that normalisation would blow up
        return np.zeros(X.shape[1]), float(y[0])
    sw = w.sum()
    x_mean = w @ X / sw
    y_mean = w @ y / sw
    Xc, yc = X - x_mean, y - y_mean
    A = Xc.T @ (Xc * w[:, None]) + ridge_lambda * np.eye(X.shape[1])
    coef = np.linalg.solve(A, Xc.T @ (w * yc))
    return coef, float(y_mean - x_mean @ coef)


def attribute_lime(model, image, target_class, spec, segmentation=None, masks=None):
    image = _check_image(model, image)
    if segmentation is None:
        segmentation = imageops.slic(image, spec.n_segments, spec.compactness, spec.seed)
    if masks is None:
        masks = lime_masks(segmentation.count, spec)
    scores = lime_scores(model, image, segmentation.labels, masks, target_class,
                         _filler_color(model, spec.filler))
    coef, _ = weighted_ridge(masks, scores, lime_weights(masks, spec.kernel_width), spec.ridge_lambda)
    return normalize(coef[segmentation.labels], Lime)


# ----------------------------------------------------------------------
# meaningful perturbation


def total_variation(mask):
    """Anisotropic TV: summed absolute forward differences down the rows and across the columns."""
    m = np.asarray(mask, dtype=np.float64)
    return float(np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum())


def total_variation_grad(mask):
    m = np.asarray(mask, dtype=np.float64)
    g = np.zeros_like(m)
    dv = np.sign(np.diff(m, axis=0))
    dh = np.sign(np.diff(m, axis=1))
    g[1:, :] += dv
    g[:-1, :] -= dv
    g[:, 1:] += dh
    g[:, :-1] -= dh
    return g


class MPObjective:
    """Loss and gradient of the meaningful-perturbation objective for one image.

    ``loss(m, tau) = l1 * |m|_1 + tv * TV(m) + f_c(jitter(x * (1 - U m U^T) + z * U m U^T, tau))``
    where ``U`` is the corner-aligned bilinear upsampling matrix and ``z`` the
    blurred image.
    """

    def __init__(self, model, image, target_class, spec):
        self.model = model
        self.image = _check_image(model, image).astype(np.float64)
        self.target_class = int(target_class)
        self.spec = spec
        d = self.image.shape[0]
        self.blurred = imageops.gaussian_blur(self.image, spec.blur_radius)
        self.up = imageops.interpolation_matrix(d, spec.mask_side)

    def upsample(self, m):
        return self.up @ m @ self.up.T

    def perturbed(self, m):
        return imageops.apply_mask(self.image, self.upsample(m), self.blurred)

    def score_and_grad(self, images):
        p, g = self.model.probability_gradients(np.asarray(images, dtype=self.model.dtype),
                                                self.target_class)
        return np.asarray(p[:, self.target_class], dtype=np.float64), np.asarray(g, dtype=np.float64)

    def __call__(self, m, tau=(0, 0)):
        m = np.asarray(m, dtype=np.float64)
        d = self.image.shape[0]
        rows = imageops.jitter_indices(d, tau[1])
        cols = imageops.jitter_indices(d, tau[0])
        xbar = self.perturbed(m)
        score, g = self.score_and_grad(xbar[rows][:, cols][None])
        g_xbar = np.zeros_like(xbar)
        np.add.at(g_xbar, (rows[:, None], cols[None, :]), g[0])
        g_up = (g_xbar * (self.blurred - self.image)).sum(axis=-1)
        spec = self.spec
        loss = spec.l1_coeff * np.abs(m).sum() + spec.tv_coeff * total_variation(m) + score[0]
        grad = (spec.l1_coeff * np.sign(m) + spec.tv_coeff * total_variation_grad(m)
                + self.up.T @ g_up @ self.up)
        return float(loss), grad, float(score[0])


def circular_init(objective):
    """Smallest centred disk whose blur removes >= 99% of the fully-blurred score drop."""
    spec = objective.spec
    k = spec.mask_side
    c = (k - 1) / 2.0
    yy, xx = np.mgrid[0:k, 0:k]
    dist = np.hypot(yy - c, xx - c)
    radii = np.unique(np.concatenate([[0.0], np.sort(dist.ravel()) + 1e-9]))
    disks = [(dist <= r).astype(np.float64) if r > 0 else np.zeros((k, k)) for r in radii]
    imgs = np.stack([objective.perturbed(m) for m in disks])
    scores = _batched_probabilities(objective.model, imgs.astype(objective.model.dtype))[:, objective.target_class]
    clean, blurred = scores[0], scores[-1]
    target_drop = 0.99 * (clean - blurred)
    for m, s in zip(disks, scores):
        if clean - s >= target_drop:
            return m
    return disks[-1]


def mp_optimize(model, image, target_class, spec, record=()):
    """Run the mask optimisation; returns (final mask (d'', d''), loss history, {step: mask})."""
    objective = MPObjective(model, image, target_class, spec)
    if spec.init == "circular":
        m = circular_init(objective)
    else:
        m = rng_for(spec.seed, 0, 0, "mp-init").uniform(0.0, 1.0, size=(spec.mask_side,) * 2)
    jitter_rng = rng_for(spec.seed, 0, 0, "mp-jitter")
    history, snapshots = [], {}
    for step in range(spec.n_iter):
        tau = tuple(int(v) for v in jitter_rng.integers(0, spec.jitter + 1, size=2))
        loss, grad, _ = objective(m, tau)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise AttributionError(f"meaningful perturbation diverged at step {step}: loss {loss}")
        history.append(loss)
        m = np.clip(m - spec.learning_rate * grad, 0.0, 1.0)
        if step + 1 in record:
            snapshots[step + 1] = m.copy()
    return m, history, snapshots


def attribute_mp(model, image, target_class, spec):
    m, _, _ = mp_optimize(model, image, target_class, spec)
    up = imageops.interpolation_matrix(model.input_side, spec.mask_side)
    return normalize(np.clip(up @ m @ up.T, 0.0, 1.0), MeaningfulPerturbation)


# ----------------------------------------------------------------------
# dispatch


def attribute(model, image, target_class, spec):
    if isinstance(spec, dict):
        spec = parse_method(spec)
    if isinstance(spec, Gradient):
        return attribute_gradient(model, image, target_class)
    if isinstance(spec, GradientInput):
        return attribute_gi(model, image, target_class)
    if isinstance(spec, GuidedBackprop):
        return attribute_guided(model, image, target_class)
    if isinstance(spec, SmoothGrad):
        return attribute_smoothgrad(model, image, target_class, spec)
    if isinstance(spec, IntegratedGradients):
        return attribute_ig(model, image, target_class, spec)
    if isinstance(spec, SlidingPatch):
        return attribute_sliding_patch(model, image, target_class, spec)
    if isinstance(spec, Lime):
        return attribute_lime(model, image, target_class, spec)
    if isinstance(spec, MeaningfulPerturbation):
        return attribute_mp(model, image, target_class, spec)
    raise TypeError(f"unsupported method spec {spec!r}")
