"""Micro convolutional classifier with exact input gradients.

Images are NHWC float arrays with values in [0, 1].  The network is a fixed
ordered list of layers (conv3x3 with zero "same" padding, relu, maxpool2x2,
flatten, dense).  Every layer implements a forward pass that caches what the
backward pass needs, so one backward call yields both the gradient with
respect to the input and the parameter gradients used by training.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv3x3", "relu", "maxpool2x2", "flatten", "dense")
PRECISIONS = {"single": np.float32, "double": np.float64}


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    learning_rate: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 6
    base_seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.lr_decay_every_epochs < 1:
            raise ValueError("lr_decay_every_epochs must be >= 1")


@dataclass
class PGDConfig:
    epsilon: float = 1.0
    step_size: float = 0.25
    num_steps: int = 7
    norm: str = "l2"
    # training only: epsilon and step ramp linearly from 0 over this many epochs
    warmup_epochs: float = 0.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.norm != "l2":
            raise ValueError("only the l2 norm is supported")


@dataclass
class Layer:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def reference_architecture(class_count=6):
    return [
        ("conv3x3", 3, 8), ("relu",), ("maxpool2x2",),
        ("conv3x3", 8, 16), ("relu",), ("maxpool2x2",),
        ("flatten",), ("dense", None, class_count),
    ]


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class MicroClassifier:
    """Small fixed-architecture CNN.

    ``architecture`` is a list of tuples: ``("conv3x3", cin, cout)``,
    ``("relu",)``, ``("maxpool2x2",)``, ``("flatten",)`` and
    ``("dense", fan_in, fan_out)``.  A dense ``fan_in`` of ``None`` is
    inferred from the input side.
    """

    def __init__(self, architecture=None, class_count=6, input_side=64,
                 precision="single", seed=0, input_mean=None, input_std=None):
        if precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        self.class_count = int(class_count)
        self.input_side = int(input_side)
        self.precision = precision
        self.dtype = PRECISIONS[precision]
        arch = architecture if architecture is not None else reference_architecture(class_count)
        self.layers = self._build(arch)
        if self.layers[-1].kind != "dense" or self.layers[-1].out_channels != self.class_count:
            raise ShapeError("last layer must be dense with class_count outputs")
        self.provenance = {}
        # fixed per-channel standardisation applied before the first layer
        self.input_mean = (np.asarray(input_mean, dtype=np.float64) if input_mean is not None
                           else np.zeros(3))
        self.input_std = (np.asarray(input_std, dtype=np.float64) if input_std is not None
                          else np.ones(3))
        self.init_parameters(seed)

    def _build(self, arch):
        layers = []
        side, channels, flat = self.input_side, 3, None
        for entry in arch:
            kind = entry[0]
            if kind == "conv3x3":
                if flat is not None:
                    raise ShapeError("conv3x3 after flatten")
                cin, cout = int(entry[1]), int(entry[2])
                if cin != channels:
                    raise ShapeError(f"conv3x3 expects {channels} input channels, got {cin}")
                layers.append(Layer(kind, cin, cout))
                channels = cout
            elif kind == "maxpool2x2":
                layers.append(Layer(kind))
                side //= 2
                if side < 1:
                    raise ShapeError("input too small for the number of pooling layers")
            elif kind == "flatten":
                layers.append(Layer(kind))
                flat = side * side * channels
            elif kind == "dense":
                if flat is None:
                    raise ShapeError("dense layer requires a preceding flatten")
                fan_in = flat if entry[1] is None else int(entry[1])
                if fan_in != flat:
                    raise ShapeError(f"dense expects fan_in {flat}, got {fan_in}")
                layers.append(Layer(kind, fan_in, int(entry[2])))
                flat = int(entry[2])
            else:
                layers.append(Layer(kind))
        return layers

    @property
    def architecture(self):
        out = []
        for layer in self.layers:
            if layer.kind in ("conv3x3", "dense"):
                out.append((layer.kind, layer.in_channels, layer.out_channels))
            else:
                out.append((layer.kind,))
        return out

    @property
    def has_relu(self):
        return any(layer.kind == "relu" for layer in self.layers)

    def init_parameters(self, seed):
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if layer.kind == "conv3x3":
                fan_in = 9 * layer.in_channels
                shape = (3, 3, layer.in_channels, layer.out_channels)
            elif layer.kind == "dense":
                fan_in = layer.in_channels
                shape = (layer.in_channels, layer.out_channels)
            else:
                continue
            bound = math.sqrt(1.0 / fan_in)
            layer.params = {
                "W": rng.uniform(-bound, bound, size=shape).astype(self.dtype),
                "b": rng.uniform(-bound, bound, size=shape[-1]).astype(self.dtype),
            }

    def parameters(self):
        """Yield ``(name, array)`` pairs in a stable order."""
        for i, layer in enumerate(self.layers):
            for key in ("W", "b"):
                if key in layer.params:
                    yield f"layer{i}.{key}", layer.params[key]

    def zero_(self):
        for _, p in self.parameters():
            p[...] = 0

    def copy(self):
        clone = MicroClassifier.__new__(MicroClassifier)
        clone.class_count = self.class_count
        clone.input_side = self.input_side
        clone.precision = self.precision
        clone.dtype = self.dtype
        clone.layers = [Layer(l.kind, l.in_channels, l.out_channels,
                              {k: v.copy() for k, v in l.params.items()}) for l in self.layers]
        clone.provenance = json.loads(json.dumps(self.provenance))
        clone.input_mean = self.input_mean.copy()
        clone.input_std = self.input_std.copy()
        return clone

    def astype(self, precision):
        clone = self.copy()
        clone.precision = precision
        clone.dtype = PRECISIONS[precision]
        for layer in clone.layers:
            layer.params = {k: v.astype(clone.dtype) for k, v in layer.params.items()}
        return clone

    # ------------------------------------------------------------------
    # forward / backward

    def _check_batch(self, images):
        x = np.asarray(images, dtype=self.dtype)
        d = self.input_side
        if x.ndim != 4 or x.shape[1:] != (d, d, 3):
            raise ShapeError(f"expected images of shape (N, {d}, {d}, 3), got {x.shape}")
        return x

    def _forward(self, x, cache):
        x = ((x - self.input_mean) / self.input_std).astype(self.dtype)
        for layer in self.layers:
            kind = layer.kind
            if kind == "conv3x3":
                n, h, w, c = x.shape
                xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
                # (n, h, w, c, 3, 3) -> (n, h, w, 3, 3, c)
                cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
                cols = cols.reshape(n * h * w, 9 * c)
                W = layer.params["W"].reshape(9 * c, -1)
                out = cols @ W + layer.params["b"]
                cache.append((cols, x.shape))
                x = out.reshape(n, h, w, -1)
            elif kind == "relu":
                cache.append(x > 0)
                x = np.maximum(x, 0)
            elif kind == "maxpool2x2":
                n, h, w, c = x.shape
                h2, w2 = h // 2, w // 2
                xc = x[:, :2 * h2, :2 * w2, :]
                win = xc.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
                # argmax returns the first maximal element in row-major window order
                idx = win.argmax(axis=-1)
                cache.append((idx, x.shape))
                x = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
            elif kind == "flatten":
                cache.append(x.shape)
                x = x.reshape(x.shape[0], -1)
            elif kind == "dense":
                cache.append(x)
                x = x @ layer.params["W"] + layer.params["b"]
        return x

    def _backward(self, grad, cache, guided=False, param_grads=None):
        for layer, saved in zip(reversed(self.layers), reversed(cache)):
            kind = layer.kind
            if kind == "dense":
                if param_grads is not None:
                    param_grads[id(layer)] = {"W": saved.T @ grad, "b": grad.sum(axis=0)}
                grad = grad @ layer.params["W"].T
            elif kind == "flatten":
                grad = grad.reshape(saved)
            elif kind == "maxpool2x2":
                idx, shape = saved
                n, h, w, c = shape
                h2, w2 = h // 2, w // 2
                win = np.zeros((n, h2, w2, c, 4), dtype=grad.dtype)
                np.put_along_axis(win, idx[..., None], grad[..., None], axis=-1)
                full = np.zeros(shape, dtype=grad.dtype)
                full[:, :2 * h2, :2 * w2, :] = (
                    win.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c))
                grad = full
            elif kind == "relu":
                if guided:
                    grad = np.where(saved & (grad > 0), grad, 0).astype(grad.dtype)
                else:
                    grad = grad * saved
            elif kind == "conv3x3":
                cols, shape = saved
                n, h, w, c = shape
                g2 = grad.reshape(n * h * w, -1)
                if param_grads is not None:
                    param_grads[id(layer)] = {
                        "W": (cols.T @ g2).reshape(layer.params["W"].shape),
                        "b": g2.sum(axis=0),
                    }
                dcols = (g2 @ layer.params["W"].reshape(9 * c, -1).T).reshape(n, h, w, 3, 3, c)
                dxp = np.zeros((n, h + 2, w + 2, c), dtype=grad.dtype)
                for i in range(3):
                    for j in range(3):
                        dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
                grad = dxp[:, 1:-1, 1:-1, :]
        return (grad / self.input_std).astype(self.dtype)

    def logits(self, images):
        """Logits for a batch ``(N, d, d, 3)``."""
        return self._forward(self._check_batch(images), [])

    def probabilities(self, images):
        """Softmax probabilities for a batch ``(N, d, d, 3)``."""
        return _softmax(self.logits(images))

    def forward(self, image):
        """Probability vector for a single ``(d, d, 3)`` image."""
        image = np.asarray(image)
        if image.ndim != 3:
            raise ShapeError(f"expected a (d, d, 3) image, got shape {image.shape}")
        return self.probabilities(image[None])[0]

    def logit(self, image):
        return self.logits(np.asarray(image)[None])[0]

    def backprop_input(self, images, upstream, guided=False):
        """Gradient of ``sum(upstream * logits)`` with respect to each image."""
        x = self._check_batch(images)
        cache = []
        out = self._forward(x, cache)
        upstream = np.asarray(upstream, dtype=self.dtype)
        if upstream.shape != out.shape:
            raise ShapeError(f"upstream shape {upstream.shape} != logits shape {out.shape}")
        return self._backward(upstream, cache, guided=guided)

    def _check_class(self, target_class):
        if not 0 <= int(target_class) < self.class_count:
            raise IndexError(f"class {target_class} out of range [0, {self.class_count})")
        return int(target_class)

    def input_gradients(self, images, target_class, guided=False):
        """d L[target] / dx for each image of a batch."""
        c = self._check_class(target_class)
        x = self._check_batch(images)
        upstream = np.zeros((x.shape[0], self.class_count), dtype=self.dtype)
        upstream[:, c] = 1
        return self.backprop_input(x, upstream, guided=guided)

    def probability_gradients(self, images, target_class):
        """Probabilities and d f[target] / dx for each image of a batch."""
        c = self._check_class(target_class)
        x = self._check_batch(images)
        cache = []
        p = _softmax(self._forward(x, cache))
        upstream = -p[:, c:c + 1] * p
        upstream[:, c] += p[:, c]
        return p, self._backward(upstream.astype(self.dtype), cache)

    def loss_and_grads(self, images, labels):
        """Mean cross-entropy, parameter gradients keyed by layer id, input gradient."""
        x = self._check_batch(images)
        labels = np.asarray(labels)
        cache = []
        logits = self._forward(x, cache)
        p = _softmax(logits.astype(np.float64))
        n = x.shape[0]
        loss = -np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300)))
        dlogits = p.copy()
        dlogits[np.arange(n), labels] -= 1
        dlogits /= n
        grads = {}
        dx = self._backward(dlogits.astype(self.dtype), cache, param_grads=grads)
        return float(loss), grads, dx

    # ------------------------------------------------------------------
    # persistence

    def manifest(self):
        return {
            "architecture": [list(a) for a in self.architecture],
            "class_count": self.class_count,
            "input_side": self.input_side,
            "precision": self.precision,
            "input_mean": [float(v) for v in self.input_mean],
            "input_std": [float(v) for v in self.input_std],
            "parameters": [name for name, _ in self.parameters()],
            "provenance": self.provenance,
        }

    def save(self, directory):
        from .tensorio import write_tensor

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, arr in self.parameters():
            write_tensor(directory / f"{name}.atns", arr)
        (directory / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        from .tensorio import read_tensor

        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        model = cls([tuple(a) for a in manifest["architecture"]], manifest["class_count"],
                    manifest["input_side"], manifest["precision"], seed=0,
                    input_mean=manifest.get("input_mean"), input_std=manifest.get("input_std"))
        for name, arr in model.parameters():
            loaded = read_tensor(directory / f"{name}.atns")
            if loaded.shape != arr.shape:
                raise ShapeError(f"{name}: stored shape {loaded.shape} != expected {arr.shape}")
            arr[...] = loaded
        model.provenance = manifest.get("provenance", {})
        return model


# ----------------------------------------------------------------------
# module-level operations


def forward(model, image):
    return model.forward(image)


def input_gradient(model, image, target_class):
    return model.input_gradients(np.asarray(image)[None], target_class)[0]


def guided_input_gradient(model, image, target_class):
    return model.input_gradients(np.asarray(image)[None], target_class, guided=True)[0]


def pgd_attack(model, images, labels, cfg):
    """L2 PGD ascending the cross-entropy loss, started at the clean image.

    Accepts a single image with an integer label or a batch with a label array.
    """
    single = np.asarray(images).ndim == 3
    x0 = np.asarray(images, dtype=model.dtype)
    if single:
        x0 = x0[None]
        labels = [labels]
    labels = np.asarray(labels)
    if cfg.epsilon == 0:
        return x0[0].copy() if single else x0.copy()
    n = x0.shape[0]
    x = x0.copy()
    for _ in range(cfg.num_steps):
        _, _, g = model.loss_and_grads(x, labels)
        gnorm = np.sqrt((g.reshape(n, -1).astype(np.float64) ** 2).sum(axis=1))
        scale = np.where(gnorm > 0, cfg.step_size / np.where(gnorm > 0, gnorm, 1), 0.0)
        x = x + (g * scale[:, None, None, None]).astype(model.dtype)
        delta = (x - x0).astype(np.float64)
        dnorm = np.sqrt((delta.reshape(n, -1) ** 2).sum(axis=1))
        shrink = np.where(dnorm > cfg.epsilon, cfg.epsilon / np.maximum(dnorm, 1e-300), 1.0)
        x = np.clip(x0 + (delta * shrink[:, None, None, None]).astype(model.dtype), 0, 1)
    return x[0] if single else x


def _lr_at(cfg, epoch):
    return cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every_epochs)


def _ramped(pgd, progress):
    if pgd.warmup_epochs <= 0 or progress >= pgd.warmup_epochs:
        return pgd
    frac = progress / pgd.warmup_epochs
    return replace(pgd, epsilon=pgd.epsilon * frac, step_size=pgd.step_size * frac)


def train(model, images, labels, config, pgd=None, log_every=0):
    """SGD with momentum on mean cross-entropy; returns ``(model, loss_history)``.

    With ``pgd`` set (and epsilon > 0) each minibatch is replaced by its PGD
    attack before the update.  The model is updated in place.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if labels.min() < 0 or labels.max() >= model.class_count:
        raise ValueError("labels out of range")
    rng = np.random.default_rng(config.base_seed)
    velocity = {(i, k): np.zeros_like(v) for i, l in enumerate(model.layers) for k, v in l.params.items()}
    history = []
    n = len(images)
    for epoch in range(config.epochs):
        lr = _lr_at(config, epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = images[idx].astype(model.dtype)
            yb = labels[idx]
            if pgd is not None and pgd.epsilon > 0:
                xb = pgd_attack(model, xb, yb, _ramped(pgd, epoch + start / n))
            loss, grads, _ = model.loss_and_grads(xb, yb)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}: {loss}")
            epoch_loss += loss * len(idx)
            for i, layer in enumerate(model.layers):
                g = grads.get(id(layer))
                if g is None:
                    continue
                for k in layer.params:
                    v = velocity[(i, k)]
                    v *= config.momentum
                    v += g[k].astype(model.dtype)
                    layer.params[k] -= model.dtype(lr) * v
        history.append(epoch_loss / n)
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d loss %.4f lr %.4g", epoch + 1, history[-1], lr)
    model.provenance = {
        "train": asdict(config),
        "pgd": asdict(pgd) if pgd is not None else None,
        "examples": int(n),
    }
    return model, history


def train_robust(model, images, labels, train_cfg, pgd_cfg, log_every=0):
    return train(model, images, labels, train_cfg, pgd=pgd_cfg, log_every=log_every)


def accuracy(model, images, labels, batch_size=256, pgd=None):
    correct = 0
    for start in range(0, len(images), batch_size):
        xb = np.asarray(images[start:start + batch_size], dtype=model.dtype)
        yb = np.asarray(labels[start:start + batch_size])
        if pgd is not None:
            xb = pgd_attack(model, xb, yb, pgd)
        correct += int((model.logits(xb).argmax(axis=1) == yb).sum())
    return correct / len(images)
