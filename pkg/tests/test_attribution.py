import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrib_sens import attribution as at
from attrib_sens import imageops, nn


def linear_model(side=8, classes=3, seed=0, precision="double"):
    return nn.MicroClassifier([("flatten",), ("dense", None, classes)], classes, side, precision, seed)


def two_layer(side=8, classes=3, hidden=6, seed=0, precision="double"):
    arch = [("flatten",), ("dense", None, hidden), ("relu",), ("dense", hidden, classes)]
    return nn.MicroClassifier(arch, classes, side, precision, seed)


def small_cnn(side=16, seed=0, precision="double"):
    return nn.MicroClassifier(None, 6, side, precision, seed)


def image(side=8, seed=0):
    return np.random.default_rng(seed).uniform(size=(side, side, 3))


class Recorder:
    """Proxy that records which model entry points an attribution method touches."""

    def __init__(self, model):
        self._model = model
        self.calls = set()

    def __getattr__(self, name):
        value = getattr(self._model, name)
        if callable(value):
            self.calls.add(name)
        return value


def _constant_model(side=8):
    m = small_cnn(side)
    m.zero_()
    return m


# ----------------------------------------------------------------------
# specs and normalisation


def test_parse_method_roundtrip_and_errors():
    spec = at.parse_method({"SmoothGrad": {"n_samples": 4, "sigma": 0.2}})
    assert spec == at.SmoothGrad(n_samples=4, sigma=0.2)
    assert at.parse_method(at.method_to_json(spec)) == spec
    assert at.parse_method("Gradient") == at.Gradient()
    with pytest.raises(ValueError, match="unknown method"):
        at.parse_method({"Saliency": {}})
    with pytest.raises(ValueError, match="unknown field"):
        at.parse_method({"Lime": {"segments": 3}})
    with pytest.raises(ValueError):
        at.SmoothGrad(n_samples=0)
    with pytest.raises(ValueError):
        at.MeaningfulPerturbation(blur_radius=-1)
    with pytest.raises(ValueError):
        at.SlidingPatch(stride=0)


def test_normalize_rules():
    assert not at.normalize(np.zeros((4, 4)), at.Gradient).values.any()
    raw = np.array([[1.0, -4.0], [2.0, 0.5]])
    np.testing.assert_array_equal(at.normalize(raw, at.Gradient()).values, raw / 4)
    mask = np.array([[0.2, 0.9], [0.0, 1.0]])
    out = at.normalize(mask, at.MeaningfulPerturbation())
    assert out.range_tag == at.MASK_UNIT
    np.testing.assert_array_equal(out.values, mask)
    np.testing.assert_array_equal(at.normalize(np.array([[2.0, -0.5]]), at.SlidingPatch).values, [[1.0, -0.5]])


# ----------------------------------------------------------------------
# gradient family


def test_gi_on_zero_image_is_zero():
    assert not at.attribute_gi(small_cnn(8), np.zeros((8, 8, 3)), 0).values.any()


def test_linear_model_closed_forms():
    m = linear_model()
    x = image()
    w = m.layers[-1].params["W"][:, 1].reshape(8, 8, 3)
    g = w.sum(-1)
    np.testing.assert_allclose(at.attribute_gradient(m, x, 1).values, g / np.abs(g).max(), atol=1e-14)
    gi = (w * x).sum(-1)
    np.testing.assert_allclose(at.attribute_gi(m, x, 1).values, gi / np.abs(gi).max(), atol=1e-14)


def test_gi_is_product_of_parts():
    m = small_cnn(8)
    x = image()
    gi = (x * nn.input_gradient(m, x, 3)).sum(-1)
    np.testing.assert_allclose(at.attribute_gi(m, x, 3).values, gi / np.abs(gi).max(), atol=1e-12)


def test_guided_equals_gradient_without_relu():
    m = linear_model()
    x = image()
    np.testing.assert_array_equal(at.attribute_guided(m, x, 0).values, at.attribute_gradient(m, x, 0).values)


def test_smoothgrad_zero_sigma_and_linear_equal_gradient():
    m = small_cnn(8)
    x = image()
    np.testing.assert_allclose(at.attribute_smoothgrad(m, x, 2, at.SmoothGrad(5, 0.0)).values,
                               at.attribute_gradient(m, x, 2).values, atol=1e-12)
    lin = linear_model()
    np.testing.assert_allclose(at.attribute_smoothgrad(lin, x, 2, at.SmoothGrad(7, 0.3)).values,
                               at.attribute_gradient(lin, x, 2).values, atol=1e-12)


def test_smoothgrad_matches_loop_over_noise_draws():
    m = small_cnn(8)
    x = image()
    spec = at.SmoothGrad(n_samples=4, sigma=0.2, seed=11)
    noise = at.smoothgrad_noise(x, spec)
    assert noise.shape == (4, 8, 8, 3)
    acc = np.zeros((8, 8, 3))
    for k in range(4):
        acc += nn.input_gradient(m, x + noise[k], 5)
    raw = (acc / 4).sum(-1)
    np.testing.assert_allclose(at.attribute_smoothgrad(m, x, 5, spec).values, raw / np.abs(raw).max(), atol=1e-12)


def test_ig_image_equals_baseline_is_zero():
    m = small_cnn(8)
    assert not at.attribute_ig(m, np.zeros((8, 8, 3)), 0, at.IntegratedGradients(10)).values.any()
    m.input_mean = np.array([0.3, 0.4, 0.5])
    flat = np.broadcast_to(m.input_mean, (8, 8, 3)).copy()
    assert not at.attribute_ig(m, flat, 0, at.IntegratedGradients(10, baseline="mean")).values.any()


@pytest.mark.parametrize("steps", [1, 7, 50])
def test_ig_linear_zero_baseline_equals_gi(steps):
    m = linear_model()
    x = image(seed=3)
    np.testing.assert_allclose(at.attribute_ig(m, x, 1, at.IntegratedGradients(steps)).values,
                               at.attribute_gi(m, x, 1).values, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ig_completeness_two_layer(seed):
    m = two_layer(seed=seed)
    x = image(seed=seed + 10)
    cls = int(np.argmax(m.logit(x)))
    raw = at.ig_raw(m, x, cls, at.IntegratedGradients(300))
    delta = m.logit(x)[cls] - m.logit(np.zeros_like(x))[cls]
    assert abs(raw.sum() - delta) <= 0.01 * abs(delta)


def test_ig_random_baseline_trials_differ_and_are_seeded():
    m = small_cnn(8)
    x = image()
    spec = at.IntegratedGradients(8, n_trials=3, baseline="random", seed=2)
    b0, b1 = at.ig_baseline(m, x, spec, 0), at.ig_baseline(m, x, spec, 1)
    assert not np.array_equal(b0, b1)
    a = at.attribute_ig(m, x, 0, spec).values
    assert a.tobytes() == at.attribute_ig(m, x, 0, spec).values.tobytes()


def test_gradient_methods_do_not_touch_image():
    m = small_cnn(8)
    x = image()
    before = x.copy()
    for spec in (at.Gradient(), at.GradientInput(), at.GuidedBackprop(), at.SmoothGrad(3),
                 at.IntegratedGradients(4)):
        at.attribute(m, x, 0, spec)
    np.testing.assert_array_equal(x, before)


# ----------------------------------------------------------------------
# sliding patch


def test_sliding_patch_grid_side():
    assert at.sliding_patch_grid_side(224, 29, 3) == 66
    assert at.sliding_patch_grid_side(64, 29, 3) == 12
    assert at.sliding_patch_grid_side(64, 53, 3) == 4


def test_sliding_patch_constant_classifier_is_zero():
    m = _constant_model()
    assert not at.attribute_sliding_patch(m, image(), 0, at.SlidingPatch(3, 1)).values.any()


def test_sliding_patch_matches_double_loop_oracle():
    m = small_cnn(8)
    m.input_mean = np.array([0.2, 0.5, 0.7])
    x = image(seed=4)
    spec = at.SlidingPatch(patch=3, stride=1, filler="mean")
    base = m.forward(x)[4]
    oracle = np.zeros((6, 6))
    for i in range(6):
        for j in range(6):
            occ = x.copy()
            occ[i:i + 3, j:j + 3] = m.input_mean
            oracle[i, j] = base - m.forward(occ)[4]
    np.testing.assert_allclose(at.sliding_patch_coarse(m, x, 4, spec), oracle, atol=1e-12)
    full = at.attribute_sliding_patch(m, x, 4, spec).values
    np.testing.assert_allclose(full, np.clip(imageops.bilinear_resize(oracle, (8, 8)), -1, 1), atol=1e-12)


def test_sliding_patch_errors():
    with pytest.raises(ValueError):
        at.attribute_sliding_patch(small_cnn(8), image(), 0, at.SlidingPatch(patch=9))


# ----------------------------------------------------------------------
# LIME


def test_lime_constant_classifier_zero_map():
    m = _constant_model()
    out = at.attribute_lime(m, image(), 0, at.Lime(n_segments=4, n_samples=50))
    np.testing.assert_allclose(out.values, 0.0, atol=1e-9)


def test_lime_deterministic():
    m = small_cnn(16)
    x = image(16)
    spec = at.Lime(n_segments=6, n_samples=40, seed=3)
    assert at.attribute_lime(m, x, 1, spec).values.tobytes() == at.attribute_lime(m, x, 1, spec).values.tobytes()


def test_lime_exhaustive_masks_match_weighted_least_squares():
    m = small_cnn(8)
    x = image(seed=5)
    labels = np.zeros((8, 8), dtype=np.int64)
    labels[:, 3:6] = 1
    labels[:, 6:] = 2
    seg = imageops.SuperpixelSegmentation(labels, 3)
    masks = np.array([[(k >> b) & 1 for b in range(3)] for k in range(8)], dtype=float)
    spec = at.Lime(n_segments=3, n_samples=8, filler="zero")
    # independent oracle: masked scores by explicit loop, then the normal equations
    # with an unpenalised intercept column
    y = []
    for row in masks:
        keep = row[labels][..., None]
        y.append(m.forward(x * keep)[2])
    y = np.array(y)
    w = np.exp(-((1 - masks.mean(axis=1)) ** 2) / 0.25 ** 2)
    X1 = np.column_stack([np.ones(8), masks])
    A = X1.T @ (X1 * w[:, None]) + 1e-3 * np.diag([0.0, 1, 1, 1])
    beta = np.linalg.solve(A, X1.T @ (w * y))
    coef, intercept = at.weighted_ridge(masks, y, w, 1e-3)
    np.testing.assert_allclose(coef, beta[1:], atol=1e-10)
    assert intercept == pytest.approx(beta[0], abs=1e-10)
    out = at.attribute_lime(m, x, 2, spec, segmentation=seg, masks=masks).values
    painted = beta[1:][labels]
    np.testing.assert_allclose(out, painted / np.abs(painted).max(), atol=1e-8)


def test_lime_weights_all_ones_mask():
    assert at.lime_weights(np.ones((1, 5)), 0.25)[0] == 1.0
    assert at.lime_weights(np.zeros((1, 5)), 0.25)[0] == pytest.approx(np.exp(-16))


def test_lime_requires_two_samples():
    with pytest.raises(ValueError):
        at.Lime(n_samples=1)


# ----------------------------------------------------------------------
# meaningful perturbation


def test_tv_definition():
    assert at.total_variation(np.full((5, 5), 0.3)) == 0.0
    m = np.array([[0.0, 1.0], [0.5, 0.5]])
    # vertical differences 0.5, 0.5; horizontal 1.0, 0.0
    assert at.total_variation(m) == pytest.approx(0.5 + 0.5 + 1.0 + 0.0)


def test_mp_objective_gradient_matches_finite_differences():
    m = small_cnn(8)
    x = image(seed=6)
    spec = at.MeaningfulPerturbation(blur_radius=2, mask_side=4, jitter=0)
    obj = at.MPObjective(m, x, 1, spec)
    mask = np.random.default_rng(7).uniform(0.1, 0.9, size=(4, 4))
    _, grad, _ = obj(mask)
    h = 1e-6
    fd = np.zeros_like(mask)
    for idx in np.ndindex(mask.shape):
        mp, mm = mask.copy(), mask.copy()
        mp[idx] += h
        mm[idx] -= h
        fd[idx] = (obj(mp)[0] - obj(mm)[0]) / (2 * h)
    rel = np.abs(grad - fd).max() / np.abs(fd).max()
    assert rel < 1e-3


def test_mp_gradient_with_jitter_matches_finite_differences():
    m = small_cnn(8)
    x = image(seed=8)
    spec = at.MeaningfulPerturbation(blur_radius=2, mask_side=4, jitter=2, l1_coeff=0, tv_coeff=0)
    obj = at.MPObjective(m, x, 0, spec)
    mask = np.random.default_rng(9).uniform(0.1, 0.9, size=(4, 4))
    _, grad, _ = obj(mask, (2, 1))
    h = 1e-6
    for idx in [(0, 0), (1, 2), (3, 3)]:
        mp, mm = mask.copy(), mask.copy()
        mp[idx] += h
        mm[idx] -= h
        fd = (obj(mp, (2, 1))[0] - obj(mm, (2, 1))[0]) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-3, abs=1e-9)


def test_mp_heavy_l1_drives_mask_to_zero():
    m = small_cnn(8)
    spec = at.MeaningfulPerturbation(blur_radius=2, n_iter=200, l1_coeff=1e6, tv_coeff=0, mask_side=4)
    mask, _, _ = at.mp_optimize(m, image(), 0, spec)
    assert np.abs(mask).max() <= 1e-3


def test_mp_output_is_mask_unit_and_deterministic():
    m = small_cnn(16)
    x = image(16, seed=2)
    spec = at.MeaningfulPerturbation(blur_radius=3, n_iter=5, mask_side=4, init="random", seed=4)
    a = at.attribute_mp(m, x, 0, spec)
    assert a.range_tag == at.MASK_UNIT and a.values.shape == (16, 16)
    assert a.values.min() >= 0 and a.values.max() <= 1
    assert a.values.tobytes() == at.attribute_mp(m, x, 0, spec).values.tobytes()


def test_mp_record_snapshots():
    m = small_cnn(8)
    spec = at.MeaningfulPerturbation(blur_radius=2, n_iter=6, mask_side=4)
    final, history, snaps = at.mp_optimize(m, image(), 0, spec, record=(3, 6))
    assert sorted(snaps) == [3, 6] and len(history) == 6
    np.testing.assert_array_equal(snaps[6], final)


def test_circular_init_is_centred_disk():
    m = small_cnn(16)
    obj = at.MPObjective(m, image(16), 0, at.MeaningfulPerturbation(blur_radius=4, mask_side=8))
    disk = at.circular_init(obj)
    assert set(np.unique(disk)) <= {0.0, 1.0}
    np.testing.assert_array_equal(disk, disk[::-1, ::-1])
    np.testing.assert_array_equal(disk, disk.T)


# ----------------------------------------------------------------------
# cross-method contracts


ALL_SPECS = [
    at.Gradient(), at.GradientInput(), at.GuidedBackprop(), at.SmoothGrad(3, 0.1, 1),
    at.IntegratedGradients(5, 2, "random", 1), at.SlidingPatch(5, 3), at.Lime(6, 30, 2),
    at.MeaningfulPerturbation(blur_radius=3, n_iter=4, mask_side=4),
]


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: type(s).__name__)
def test_every_method_shape_range_and_purity(spec):
    m = small_cnn(16, precision="single")
    x = image(16, seed=1).astype(np.float32)
    a = at.attribute(m, x, 3, spec)
    assert a.values.shape == (16, 16)
    lo = 0.0 if a.range_tag == at.MASK_UNIT else -1.0
    assert a.values.min() >= lo and a.values.max() <= 1.0
    assert a.values.tobytes() == at.attribute(m, x, 3, spec).values.tobytes()


def test_black_box_methods_use_forward_only():
    m = small_cnn(16)
    x = image(16)
    for spec in (at.SlidingPatch(5, 3), at.Lime(6, 30)):
        rec = Recorder(m)
        at.attribute(rec, x, 0, spec)
        assert "input_gradients" not in rec.calls and "probability_gradients" not in rec.calls
        assert "probabilities" in rec.calls
    # mask optimisation needs the probability gradient but never the logit gradient
    rec = Recorder(m)
    at.attribute(rec, x, 0, at.MeaningfulPerturbation(blur_radius=3, n_iter=2, mask_side=4))
    assert "input_gradients" not in rec.calls


def test_image_shape_checked():
    with pytest.raises(ValueError):
        at.attribute_gradient(small_cnn(8), np.zeros((9, 8, 3)), 0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.floats(0.1, 10))
def test_normalized_gradient_scale_invariant(seed, scale):
    raw = np.random.default_rng(seed).normal(size=(6, 6))
    a = at.normalize(raw, at.Gradient).values
    b = at.normalize(raw * scale, at.Gradient).values
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert np.abs(a).max() == pytest.approx(1.0)
