"""Experiment protocols: noise invariance, smoothing trends, hyperparameter
sensitivity, per-image and global accuracy variance, object-size study.

Work is split into independent items (one per image and model).  Items may
run on a thread pool; every random draw is seeded from
``(base_seed, image_index, variant_index, tag)`` and results are merged by a
stable sort on ``(image, model, value position)``, so the output never
depends on the worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from . import attribution as at
from . import data, imageops, metrics
from .seeding import seed_for, rng_for

SIMILARITY_METRICS = ("spearman", "pearson_hog", "ssim")
ACCURACY_METRICS = ("loc_error", "deletion_auc", "insertion_auc")
ALL_METRICS = SIMILARITY_METRICS + ACCURACY_METRICS
REPORT_COLUMNS = ("image_id", "model_id", "method", "swept_field", "variant_value") + ALL_METRICS


@dataclass(frozen=True)
class ImageItem:
    """One evaluation image with its ground truth."""

    image_id: int
    image: np.ndarray
    label: int
    mask: np.ndarray

    @classmethod
    def from_sample(cls, sample):
        return cls(int(sample.index), sample.image, int(sample.label), sample.gt_mask)


def items_from_samples(samples):
    return [ImageItem.from_sample(s) for s in samples]


@dataclass
class Row:
    image_id: Any
    model_id: str
    method: str
    swept_field: str
    variant_value: Any
    spearman: float | None = None
    pearson_hog: float | None = None
    ssim: float | None = None
    loc_error: float | None = None
    deletion_auc: float | None = None
    insertion_auc: float | None = None
    # position of variant_value in the sweep (0 = reference); merge key only
    order: int = field(default=0, compare=False, repr=False)

    def values(self):
        return [getattr(self, c) for c in REPORT_COLUMNS]


@dataclass
class SensitivityReport:
    kind: str
    rows: list
    aggregates: dict


@dataclass(frozen=True)
class SweepSpec:
    """One hyperparameter sweep: the reference value plus the variants compared against it."""

    method: Any
    swept_field: str
    reference_value: Any
    variant_values: tuple
    models: tuple = ()
    metrics: tuple = SIMILARITY_METRICS

    def __post_init__(self):
        object.__setattr__(self, "variant_values", tuple(self.variant_values))
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        if not self.variant_values:
            raise ValueError("a sweep needs at least one variant value")
        if self.reference_value in self.variant_values:
            raise ValueError(f"reference value {self.reference_value!r} repeated among variants")
        if len(set(map(repr, self.variant_values))) != len(self.variant_values):
            raise ValueError("duplicate variant values")
        unknown = sorted(set(self.metrics) - set(ALL_METRICS))
        if unknown:
            raise ValueError(f"unknown metrics {unknown}; expected a subset of {list(ALL_METRICS)}")

    @property
    def values(self):
        return (self.reference_value,) + self.variant_values

    def method_at(self, value):
        """Method spec with the swept field set; sweeping a field the method lacks leaves it as is."""
        names = {f.name for f in fields(self.method)}
        if self.swept_field in names:
            return replace(self.method, **{self.swept_field: value})
        return self.method


# ----------------------------------------------------------------------
# helpers


def _per_image_spec(spec, image_id):
    """Give every image its own draws while keeping the swept seed meaningful."""
    if "seed" in {f.name for f in fields(spec)}:
        return replace(spec, seed=seed_for(spec.seed, image_id, 0, "image"))
    return spec


def _attribute(model, item, spec):
    return at.attribute(model, item.image, item.label, _per_image_spec(spec, item.image_id)).values


def _similarity_values(a, b, wanted):
    out = {}
    if "spearman" in wanted:
        out["spearman"] = metrics.spearman(a, b)
    if "pearson_hog" in wanted:
        out["pearson_hog"] = metrics.pearson_hog(a, b)
    if "ssim" in wanted:
        out["ssim"] = metrics.ssim(a, b)
    return out


def _accuracy_values(model, item, amap, wanted):
    out = {}
    if "loc_error" in wanted:
        out["loc_error"] = metrics.localization_error(amap, item.mask)
    if "deletion_auc" in wanted:
        out["deletion_auc"] = metrics.deletion(model, item.image, amap, item.label)
    if "insertion_auc" in wanted:
        out["insertion_auc"] = metrics.insertion(model, item.image, amap, item.label)
    return out


def _run_items(func, work, threads):
    """Map ``func`` over ``work`` (ordered) with single-threaded BLAS inside."""
    with threadpool_limits(limits=1):
        if threads <= 1 or len(work) <= 1:
            return [func(w) for w in work]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(func, work))


def _merge(chunks, model_ids):
    rank = {m: i for i, m in enumerate(model_ids)}
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=lambda r: (str(type(r.image_id)), r.image_id, rank.get(r.model_id, len(rank)), r.order))
    return rows


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(math.fsum(values) / len(values)) if values else None


def sample_std(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("sample std needs at least two values")
    if np.all(values == values[0]):
        return 0.0
    mean = math.fsum(values) / values.size
    return math.sqrt(math.fsum((values - mean) ** 2) / (values.size - 1))


def _mean_triples(rows, key=lambda r: r.model_id):
    groups = {}
    for r in rows:
        groups.setdefault(key(r), []).append(r)
    return {k: {m: _mean_or_none([getattr(r, m) for r in g]) for m in SIMILARITY_METRICS}
            for k, g in groups.items()}


# ----------------------------------------------------------------------
# noise invariance


def run_noise_invariance(models, items, method=at.Gradient(), sigma=0.1, base_seed=0, threads=1):
    """Similarity between the maps of each clean image and its noisy copy.

    ``models`` maps model id to model.  The noise for an image depends only on
    ``(base_seed, image_id)`` so every model sees the same noisy copy.
    """
    name = at.method_name(method)

    def work(job):
        model_id, item = job
        model = models[model_id]
        noise_rng = rng_for(base_seed, item.image_id, 0, "noise-invariance")
        noisy = imageops.add_gaussian_noise(item.image.astype(np.float64), sigma, noise_rng)
        noisy_item = replace(item, image=noisy.astype(item.image.dtype))
        a = _attribute(model, item, method)
        b = _attribute(model, noisy_item, method)
        return [Row(item.image_id, model_id, name, "sigma", sigma, **_similarity_values(a, b, SIMILARITY_METRICS))]

    jobs = [(m, it) for it in items for m in models]
    rows = _merge(_run_items(work, jobs, threads), list(models))
    return SensitivityReport("noise_invariance", rows, {"mean": _mean_triples(rows), "sigma": sigma})


# ----------------------------------------------------------------------
# smoothing trend


def _smoothing_pair(method):
    """(swept field, regular-model spec at value, robust-model comparison spec)."""
    if isinstance(method, at.SmoothGrad):
        return "n_samples", lambda v: at.Gradient() if v == 0 else replace(method, n_samples=v), at.Gradient()
    if isinstance(method, at.IntegratedGradients):
        return ("n_trials", lambda v: at.GradientInput() if v == 0 else replace(method, n_trials=v),
                at.GradientInput())
    raise ValueError("smoothing trend supports SmoothGrad and IntegratedGradients")


def nondecreasing_fraction(values):
    steps = list(zip(values[:-1], values[1:]))
    if not steps:
        return 1.0
    return sum(b >= a for a, b in steps) / len(steps)


def run_smoothing_trend(regular, robust, items, method, values, regular_id="regular",
                        robust_id="robust", threads=1, include_guided=True):
    """Similarity of the regular model's smoothed map to the robust model's plain map.

    A sweep value of 0 means no smoothing (plain Gradient, or GradientInput for
    IG).  When ``include_guided`` is set a GuidedBackprop row for the regular
    model is added per image.
    """
    swept, regular_spec, robust_spec = _smoothing_pair(method)
    name = at.method_name(method)
    pair_id = f"{regular_id}~{robust_id}"

    def work(item):
        target = _attribute(robust, item, robust_spec)
        out = []
        for k, v in enumerate(values):
            a = _attribute(regular, item, regular_spec(v))
            out.append(Row(item.image_id, pair_id, name, swept, v,
                           order=k, **_similarity_values(a, target, SIMILARITY_METRICS)))
        if include_guided:
            g = _attribute(regular, item, at.GuidedBackprop())
            out.append(Row(item.image_id, pair_id, "GuidedBackprop", "none", "", order=len(values),
                           **_similarity_values(g, target, SIMILARITY_METRICS)))
        return out

    rows = _merge(_run_items(work, list(items), threads), [pair_id])
    per_value = {}
    for k, v in enumerate(values):
        sel = [r for r in rows if r.order == k]
        per_value[str(v)] = _mean_triples(sel, key=lambda r: "all")["all"]
    trend = [per_value[str(v)]["ssim"] for v in values]
    agg = {
        "swept_field": swept,
        "values": list(values),
        "mean_by_value": per_value,
        "ssim_nondecreasing_fraction": nondecreasing_fraction(trend),
    }
    if include_guided:
        agg["guided_backprop"] = _mean_triples([r for r in rows if r.method == "GuidedBackprop"],
                                               key=lambda r: "all")["all"]
    return SensitivityReport("smoothing_trend", rows, agg)


# ----------------------------------------------------------------------
# hyperparameter sweeps


def run_sweep_rows(spec, models, items, threads=1):
    """Rows for every (image, model, sweep value); the reference row comes first.

    Similarity columns compare each map with the reference map of the same
    image and model (the reference row compares the reference with itself).
    Accuracy columns score each map on its own.
    """
    wanted = set(spec.metrics)
    sim_wanted = wanted & set(SIMILARITY_METRICS)
    acc_wanted = wanted & set(ACCURACY_METRICS)
    name = at.method_name(spec.method)
    model_ids = list(spec.models) or list(models)
    missing = [m for m in model_ids if m not in models]
    if missing:
        raise KeyError(f"sweep references unknown models {missing}")

    def work(job):
        model_id, item = job
        model = models[model_id]
        out = []
        reference = None
        for k, value in enumerate(spec.values):
            amap = _attribute(model, item, spec.method_at(value))
            if reference is None:
                reference = amap
            vals = _similarity_values(amap, reference, sim_wanted)
            vals.update(_accuracy_values(model, item, amap, acc_wanted))
            out.append(Row(item.image_id, model_id, name, spec.swept_field, value, order=k, **vals))
        return out

    jobs = [(m, it) for it in items for m in model_ids]
    return _merge(_run_items(work, jobs, threads), model_ids)


def similarity_aggregates(rows):
    """Mean similarity-to-reference per model, over variant rows only."""
    return _mean_triples([r for r in rows if r.order > 0])


def accuracy_variance(rows, metric_names=ACCURACY_METRICS):
    """Per image: mean and sample std of each accuracy metric over all sweep values
    (reference included); then per model the mean of means and mean of stds."""
    groups = {}
    for r in rows:
        groups.setdefault((r.model_id, r.image_id), []).append(r)
    per_image = {}
    summary = {}
    for (model_id, image_id), group in groups.items():
        if len(group) < 2:
            raise ValueError("accuracy variance needs at least two sweep values per image")
        entry = {}
        for m in metric_names:
            vals = [getattr(r, m) for r in group]
            if any(v is None for v in vals):
                continue
            entry[m] = {"mean": math.fsum(vals) / len(vals), "std": sample_std(vals)}
        per_image.setdefault(model_id, {})[str(image_id)] = entry
    for model_id, images in per_image.items():
        summary[model_id] = {}
        for m in metric_names:
            stats = [e[m] for e in images.values() if m in e]
            if stats:
                summary[model_id][m] = {
                    "mean_of_means": math.fsum(s["mean"] for s in stats) / len(stats),
                    "mean_of_stds": math.fsum(s["std"] for s in stats) / len(stats),
                }
    return {"per_image": per_image, "dataset": summary}


def global_std(rows, metric_names=ACCURACY_METRICS):
    """Per model: dataset-mean score per sweep value, sample std over the values;
    then the average of those stds across models."""
    per_model = {}
    by_model = {}
    for r in rows:
        by_model.setdefault(r.model_id, {}).setdefault(r.order, []).append(r)
    for model_id, by_value in by_model.items():
        per_model[model_id] = {}
        for m in metric_names:
            means = []
            for order in sorted(by_value):
                vals = [getattr(r, m) for r in by_value[order]]
                if any(v is None for v in vals):
                    break
                means.append(math.fsum(vals) / len(vals))
            else:
                if len(means) >= 2:
                    per_model[model_id][m] = sample_std(means)
    overall = {}
    for m in metric_names:
        stds = [v[m] for v in per_model.values() if m in v]
        if stds:
            overall[m] = math.fsum(stds) / len(stds)
    return {"per_model": per_model, "global": overall}


def sweep_aggregates(rows, metric_names):
    """Every aggregate the computed metrics allow: similarity to reference,
    per-image accuracy variance and global accuracy std."""
    agg = {}
    if set(metric_names) & set(SIMILARITY_METRICS):
        agg["similarity"] = similarity_aggregates(rows)
    acc = [m for m in ACCURACY_METRICS if m in metric_names]
    if acc:
        agg["accuracy_variance"] = accuracy_variance(rows, acc)
        agg["global_std"] = global_std(rows, acc)
    return agg


def run_hyperparam_sensitivity(spec, models, items, threads=1):
    rows = run_sweep_rows(spec, models, items, threads)
    return SensitivityReport("hyperparam_sensitivity", rows, sweep_aggregates(rows, spec.metrics))


def run_accuracy_variance_per_image(spec, models, items, threads=1):
    rows = run_sweep_rows(spec, models, items, threads)
    return SensitivityReport("accuracy_variance", rows, sweep_aggregates(rows, spec.metrics))


def run_global_accuracy_std(spec, models, items, threads=1):
    rows = run_sweep_rows(spec, models, items, threads)
    return SensitivityReport("global_std", rows, sweep_aggregates(rows, spec.metrics))


# ----------------------------------------------------------------------
# object-size study


def run_object_size_study(model, ball_sizes, patch_sizes, stride=3, model_id="model",
                          target_class=None, threads=1):
    """Sliding-patch maps of single disks on a zero background.

    Returns rows (localization error against the disk) and a table of the
    maximum absolute coarse-grid attribution per (disk size, patch size).
    The target class defaults to the model's prediction on each disk image.
    """
    side = model.input_side

    def work(job):
        k, diameter = job
        image, mask = data.render_disk(diameter, side)
        cls = int(np.argmax(model.forward(image))) if target_class is None else int(target_class)
        out, table, maps = [], {}, {}
        for j, p in enumerate(patch_sizes):
            spec = at.SlidingPatch(patch=int(p), stride=stride, filler="zero")
            coarse = at.sliding_patch_coarse(model, image.astype(model.dtype), cls, spec)
            amap = at.attribute_sliding_patch(model, image.astype(model.dtype), cls, spec).values
            table[str(p)] = float(np.abs(coarse).max())
            maps[p] = amap
            out.append(Row(f"disk{diameter}", model_id, "SlidingPatch", "patch", int(p), order=j,
                           loc_error=metrics.localization_error(amap, mask) if mask.any() else None))
        return out, table, maps

    results = _run_items(work, list(enumerate(ball_sizes)), threads)
    rows = [r for res in results for r in res[0]]
    table = {str(d): res[1] for d, res in zip(ball_sizes, results)}
    maps = {d: res[2] for d, res in zip(ball_sizes, results)}
    report = SensitivityReport("object_size_study", rows, {"max_abs_attribution": table,
                                                           "stride": stride})
    report.maps = maps
    return report


def blank_ratio(table, ball_size, small_patch, matched_patch):
    """max|a| at a small patch divided by max|a| at a patch matching the object."""
    t = table[str(ball_size)]
    big = t[str(matched_patch)]
    return t[str(small_patch)] / big if big > 0 else math.inf
