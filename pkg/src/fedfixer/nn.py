"""Differentiable classifiers over flat float64 parameter vectors.

Two architectures are provided: a fully connected `MLP` (the desk-scale
default) and a `LeNet` style convolutional stack for fidelity runs. Both
expose the same surface:

* ``init_params(rng)`` -- He-style fan-in scaled initialization,
* ``forward(params, features)`` -- logits for a feature matrix,
* ``forward_cached`` / ``backprop`` -- the two halves of the backward pass.

Keeping parameters in one flat vector makes federated averaging, proximal
and distance penalties, and SGD plain vector arithmetic. Gradients are
hand-rolled; the test suite checks them against central finite differences.

All functions are pure. Double precision throughout: the finite-difference
gradient checks need it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, NumericsError
from .losses import ce_loss, log_softmax, softmax, validate_prior


class Architecture:
    """Common checks for the flat-parameter classifiers."""

    input_dim: int
    num_classes: int

    @property
    def param_count(self) -> int:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def forward(self, params: np.ndarray, features: np.ndarray) -> np.ndarray:
        logits, _ = self.forward_cached(params, features)
        return logits

    def forward_cached(self, params, features):
        raise NotImplementedError

    def backprop(self, params, cache, dlogits) -> np.ndarray:
        raise NotImplementedError

    def _check_inputs(self, params: np.ndarray, features: np.ndarray) -> None:
        if params.shape != (self.param_count,):
            raise ConfigError(
                f"parameter vector has shape {params.shape}, "
                f"expected ({self.param_count},)"
            )
        if features.ndim != 2 or features.shape[0] == 0:
            raise ConfigError("features must be a non-empty (batch, input_dim) matrix")
        if features.shape[1] != self.input_dim:
            raise ConfigError(
                f"feature dimension {features.shape[1]} != input_dim {self.input_dim}"
            )


@dataclass(frozen=True)
class MLP(Architecture):
    """ReLU multi-layer perceptron with a linear multinomial-logistic head.

    ``hidden_dims=()`` gives a bare linear classifier, handy in tests.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("layer dimensions must be positive")

    @cached_property
    def layer_dims(self) -> tuple[tuple[int, int], ...]:
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        return tuple(zip(dims[:-1], dims[1:]))

    @cached_property
    def param_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_dims)

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (no copies) of the weight matrices and bias vectors."""
        layers = []
        offset = 0
        for fan_in, fan_out in self.layer_dims:
            w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = params[offset : offset + fan_out]
            offset += fan_out
            layers.append((w, b))
        return layers

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        chunks = []
        for fan_in, fan_out in self.layer_dims:
            std = np.sqrt(2.0 / fan_in)
            chunks.append(rng.normal(0.0, std, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def forward_cached(self, params, features):
        self._check_inputs(params, features)
        layers = self.unpack(params)
        inputs = []  # input to each layer; inputs[l] > 0 is the ReLU mask for l >= 1
        h = np.asarray(features, dtype=np.float64)
        for i, (w, b) in enumerate(layers):
            inputs.append(h)
            z = h @ w + b
            h = z if i == len(layers) - 1 else np.maximum(z, 0.0)
        return h, inputs

    def backprop(self, params, cache, dlogits):
        grad, _ = self.backprop_with_input(params, cache, dlogits)
        return grad

    def backprop_with_input(self, params, cache, dlogits):
        """Flat parameter gradient plus the gradient w.r.t. the features."""
        layers = self.unpack(params)
        grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(layers)
        delta = dlogits
        for i in reversed(range(len(layers))):
            w, _ = layers[i]
            grads[i] = (cache[i].T @ delta, delta.sum(axis=0))
            delta = delta @ w.T
            if i > 0:
                delta = delta * (cache[i] > 0)
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        return flat, delta


@dataclass(frozen=True)
class LeNet(Architecture):
    """Two conv + average-pool blocks feeding a fully connected stack.

    Defaults match the classic 5-layer convolutional net on 28x28 grayscale
    images (6 and 16 feature maps, 120/84 hidden units). ReLU activations.
    Features arrive flattened, matching the loaders in `fedfixer.data`.
    """

    image_shape: tuple[int, int] = (28, 28)
    in_channels: int = 1
    conv_channels: tuple[int, int] = (6, 16)
    fc_dims: tuple[int, ...] = (120, 84)
    num_classes: int = 10
    kernel: int = 5

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        object.__setattr__(self, "fc_dims", tuple(int(v) for v in self.fc_dims))
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        h, w = self.image_shape
        pad = self.kernel // 2
        h1, w1 = h + 2 * pad - self.kernel + 1, w + 2 * pad - self.kernel + 1
        if h1 % 2 or w1 % 2:
            raise ConfigError("first pooled map must have even spatial dims")
        h2, w2 = h1 // 2 - self.kernel + 1, w1 // 2 - self.kernel + 1
        if h2 <= 0 or w2 <= 0 or h2 % 2 or w2 % 2:
            raise ConfigError(f"image {self.image_shape} too small for kernel {self.kernel}")

    @cached_property
    def input_dim(self) -> int:
        return self.in_channels * self.image_shape[0] * self.image_shape[1]

    @cached_property
    def _shapes(self):
        """Spatial bookkeeping: (conv1 out hw, pooled1 hw, conv2 out hw, pooled2 hw)."""
        k = self.kernel
        h, w = self.image_shape
        pad = k // 2
        c1 = (h + 2 * pad - k + 1, w + 2 * pad - k + 1)
        p1 = (c1[0] // 2, c1[1] // 2)
        c2 = (p1[0] - k + 1, p1[1] - k + 1)
        p2 = (c2[0] // 2, c2[1] // 2)
        return c1, p1, c2, p2

    @cached_property
    def _dense(self) -> MLP:
        _, _, _, p2 = self._shapes
        flat = self.conv_channels[1] * p2[0] * p2[1]
        return MLP(flat, self.fc_dims, self.num_classes)

    @cached_property
    def param_count(self) -> int:
        k = self.kernel
        c1, c2 = self.conv_channels
        conv = c1 * self.in_channels * k * k + c1 + c2 * c1 * k * k + c2
        return conv + self._dense.param_count

    def _split(self, params):
        k = self.kernel
        c1, c2 = self.conv_channels
        n1 = c1 * self.in_channels * k * k
        n2 = c2 * c1 * k * k
        off = 0
        w1 = params[off : off + n1].reshape(c1, self.in_channels * k * k)
        off += n1
        b1 = params[off : off + c1]
        off += c1
        w2 = params[off : off + n2].reshape(c2, c1 * k * k)
        off += n2
        b2 = params[off : off + c2]
        off += c2
        return w1, b1, w2, b2, params[off:]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        k = self.kernel
        c1, c2 = self.conv_channels
        fan1 = self.in_channels * k * k
        fan2 = c1 * k * k
        return np.concatenate(
            [
                rng.normal(0.0, np.sqrt(2.0 / fan1), size=c1 * fan1),
                np.zeros(c1),
                rng.normal(0.0, np.sqrt(2.0 / fan2), size=c2 * fan2),
                np.zeros(c2),
                self._dense.init_params(rng),
            ]
        )

    def forward_cached(self, params, features):
        self._check_inputs(params, features)
        w1, b1, w2, b2, dense_params = self._split(params)
        n = features.shape[0]
        pad = self.kernel // 2
        x = np.asarray(features, dtype=np.float64).reshape(
            n, self.in_channels, *self.image_shape
        )
        cols1 = _im2col(x, self.kernel, pad)
        z1 = cols1 @ w1.T + b1
        a1 = np.maximum(z1, 0.0)  # (n*oh*ow, c1)
        c1hw, p1hw, c2hw, _ = self._shapes
        a1_maps = _cols_to_maps(a1, n, c1hw)
        pool1 = _avgpool2(a1_maps)

        cols2 = _im2col(pool1, self.kernel, 0)
        z2 = cols2 @ w2.T + b2
        a2 = np.maximum(z2, 0.0)
        a2_maps = _cols_to_maps(a2, n, c2hw)
        pool2 = _avgpool2(a2_maps)

        flat = pool2.reshape(n, -1)
        logits, dense_cache = self._dense.forward_cached(dense_params, flat)
        cache = (x.shape, cols1, a1, cols2, a2, dense_cache)
        return logits, cache

    def backprop(self, params, cache, dlogits):
        w1, _, w2, _, dense_params = self._split(params)
        x_shape, cols1, a1, cols2, a2, dense_cache = cache
        n = x_shape[0]
        c1hw, p1hw, c2hw, p2hw = self._shapes

        dense_grad, dflat = self._dense.backprop_with_input(dense_params, dense_cache, dlogits)
        dpool2 = dflat.reshape(n, self.conv_channels[1], *p2hw)

        da2_maps = _avgpool2_back(dpool2)
        da2 = _maps_to_cols(da2_maps) * (a2 > 0)
        gw2 = da2.T @ cols2
        gb2 = da2.sum(axis=0)
        dcols2 = da2 @ w2
        dpool1 = _col2im(dcols2, (n, self.conv_channels[0], *p1hw), self.kernel, 0)

        da1_maps = _avgpool2_back(dpool1)
        da1 = _maps_to_cols(da1_maps) * (a1 > 0)
        gw1 = da1.T @ cols1
        gb1 = da1.sum(axis=0)

        return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2, dense_grad])


def _im2col(x: np.ndarray, kernel: int, pad: int) -> np.ndarray:
    """(n, c, h, w) -> (n*oh*ow, c*kernel*kernel) patch matrix, stride 1."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    n, c, oh, ow, _, _ = windows.shape
    return (
        windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kernel * kernel)
    )


def _col2im(cols: np.ndarray, out_shape, kernel: int, pad: int) -> np.ndarray:
    """Scatter-add transpose of `_im2col`."""
    n, c, h, w = out_shape
    oh, ow = h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1
    patches = cols.reshape(n, oh, ow, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
    acc = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kernel):
        for j in range(kernel):
            acc[:, :, i : i + oh, j : j + ow] += patches[:, :, :, :, i, j]
    return acc[:, :, pad : pad + h, pad : pad + w] if pad else acc


def _cols_to_maps(cols: np.ndarray, n: int, hw: tuple[int, int]) -> np.ndarray:
    return cols.reshape(n, hw[0], hw[1], -1).transpose(0, 3, 1, 2)


def _maps_to_cols(maps: np.ndarray) -> np.ndarray:
    n, c, h, w = maps.shape
    return maps.transpose(0, 2, 3, 1).reshape(n * h * w, c)


def _avgpool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_back(dy: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0


def init_params(arch: Architecture, seed) -> np.ndarray:
    """Seeded parameter initialization; identical seeds give identical vectors."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return arch.init_params(rng)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError("labels out of range for the architecture's class count")
    return labels


def ce_loss_and_grad(
    arch: Architecture, params: np.ndarray, features: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-example CE losses and the batch-mean gradient w.r.t. params."""
    labels = _check_labels(labels, arch.num_classes)
    logits, cache = arch.forward_cached(params, features)
    losses = ce_loss(logits, labels)
    probs = softmax(logits)
    probs[np.arange(len(labels)), labels] -= 1.0
    grad = arch.backprop(params, cache, probs / len(labels))
    return losses, grad


def combined_loss_and_grad(
    arch: Architecture,
    params: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    prior: np.ndarray,
    cr_weight: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-example CE+CR losses and batch-mean gradient.

    d(CE + CR)/dlogits = (softmax - onehot) - cr_weight * (softmax - prior);
    at cr_weight == 0 this is exactly `ce_loss_and_grad`.
    """
    if cr_weight == 0.0:
        return ce_loss_and_grad(arch, params, features, labels)
    labels = _check_labels(labels, arch.num_classes)
    prior = validate_prior(prior, arch.num_classes)
    logits, cache = arch.forward_cached(params, features)
    logp = log_softmax(logits)
    losses = -logp[np.arange(len(labels)), labels] + cr_weight * (logp @ prior)
    probs = np.exp(logp)
    dlogits = (1.0 - cr_weight) * probs + cr_weight * prior
    dlogits[np.arange(len(labels)), labels] -= 1.0
    grad = arch.backprop(params, cache, dlogits / len(labels))
    return losses, grad


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """One plain SGD step: params - lr * grad."""
    if params.shape != grad.shape:
        raise ConfigError(f"shape mismatch: params {params.shape} vs grad {grad.shape}")
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    return params - lr * grad


def check_finite(losses: np.ndarray, context: str) -> None:
    """Abort the run if training produced non-finite losses."""
    if not np.all(np.isfinite(losses)):
        raise NumericsError(f"non-finite training loss at {context}")
