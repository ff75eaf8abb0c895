"""Small classifiers addressed through one flat parameter vector.

Two architectures are provided:

* ``mlp``: dense layers ``layer_sizes = [in, hidden..., out]`` with an
  activation between them (no hidden layer gives a linear classifier).
* ``tiny_conv``: one valid 3x3 convolution with ``layer_sizes[0]`` channels,
  activation, 2x2 average pooling, then a dense layer to the classes.

Parameters are laid out layer by layer, weight before bias.  Weights are
stored as (fan_out, fan_in) matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    layer_sizes: tuple
    input_shape: tuple
    num_classes: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.architecture == "mlp":
            sizes = self.layer_sizes
            if len(sizes) < 2:
                raise ValueError("mlp layer_sizes needs at least [in, out]")
            if sizes[0] != int(np.prod(self.input_shape)):
                raise ValueError(
                    f"mlp input width {sizes[0]} does not match input_shape {self.input_shape}"
                )
            if sizes[-1] != self.num_classes:
                raise ValueError(f"mlp output width {sizes[-1]} != num_classes {self.num_classes}")
        elif self.architecture == "tiny_conv":
            if len(self.layer_sizes) != 1:
                raise ValueError("tiny_conv layer_sizes is [conv_channels]")
            if len(self.input_shape) != 3:
                raise ValueError("tiny_conv input_shape is (channels, height, width)")
            _, h, w = self.input_shape
            if h < 4 or w < 4 or (h - 2) % 2 or (w - 2) % 2:
                raise ValueError(f"tiny_conv needs even H-2 and W-2, got input_shape {self.input_shape}")
        else:
            raise ValueError(f"unknown architecture {self.architecture!r}")

    @property
    def param_shapes(self) -> list[tuple]:
        if self.architecture == "mlp":
            shapes = []
            for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
                shapes += [(fan_out, fan_in), (fan_out,)]
            return shapes
        c, h, w = self.input_shape
        f = self.layer_sizes[0]
        pooled = f * ((h - 2) // 2) * ((w - 2) // 2)
        return [(f, c * 9), (f,), (self.num_classes, pooled), (self.num_classes,)]

    @property
    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes))

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "layer_sizes": list(self.layer_sizes),
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            architecture=d["architecture"],
            layer_sizes=tuple(d["layer_sizes"]),
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            activation=d.get("activation", "tanh"),
        )


@dataclass(frozen=True, eq=False)
class ModelState:
    spec: ModelSpec
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (self.spec.param_count,):
            raise ShapeError(f"theta has shape {theta.shape}, spec needs ({self.spec.param_count},)")
        object.__setattr__(self, "theta", theta)

    @property
    def param_count(self) -> int:
        return self.spec.param_count

    def params(self) -> list[np.ndarray]:
        return unflatten(self.spec, self.theta)

    def with_theta(self, theta) -> "ModelState":
        return ModelState(self.spec, np.array(theta, dtype=np.float64))


def flatten(params) -> np.ndarray:
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in params])


def unflatten(spec: ModelSpec, theta: np.ndarray) -> list[np.ndarray]:
    out, offset = [], 0
    for shape in spec.param_shapes:
        n = int(np.prod(shape))
        out.append(theta[offset:offset + n].reshape(shape))
        offset += n
    return out


def init_model(spec: ModelSpec, seed: int) -> ModelState:
    """Fan-in scaled uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for shape in spec.param_shapes:
        if len(shape) == 1:
            params.append(np.zeros(shape))
        else:
            bound = 1.0 / np.sqrt(shape[1])
            params.append(rng.uniform(-bound, bound, size=shape))
    return ModelState(spec, flatten(params))


@lru_cache(maxsize=None)
def _conv_index(c: int, h: int, w: int) -> np.ndarray:
    """Flat input indices of every 3x3 patch: shape (positions, c*9)."""
    oh, ow = h - 2, w - 2
    idx = np.empty((oh * ow, c * 9), dtype=np.int64)
    for i in range(oh):
        for j in range(ow):
            cols = [ch * h * w + (i + di) * w + (j + dj) for ch in range(c) for di in range(3) for dj in range(3)]
            idx[i * ow + j] = cols
    return idx


@lru_cache(maxsize=None)
def _pool_index(oh: int, ow: int) -> np.ndarray:
    """Conv-output positions feeding each 2x2 pooling window: (windows, 4)."""
    ph, pw = oh // 2, ow // 2
    idx = np.empty((ph * pw, 4), dtype=np.int64)
    for i in range(ph):
        for j in range(pw):
            r, c = 2 * i, 2 * j
            idx[i * pw + j] = [r * ow + c, r * ow + c + 1, (r + 1) * ow + c, (r + 1) * ow + c + 1]
    return idx


def _split(spec: ModelSpec, theta: Tensor) -> list[Tensor]:
    out, offset = [], 0
    for shape in spec.param_shapes:
        n = int(np.prod(shape))
        out.append(ad.reshape(theta[offset:offset + n], shape))
        offset += n
    return out


def forward_tensor(spec: ModelSpec, theta: Tensor, x: Tensor) -> Tensor:
    """Differentiable logits for a batch ``x`` of shape (batch, *input_shape)."""
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match input_shape {spec.input_shape}")
    n = x.shape[0]
    params = _split(spec, theta)
    if spec.architecture == "mlp":
        h = ad.reshape(x, (n, spec.layer_sizes[0]))
        layers = list(zip(params[0::2], params[1::2]))
        for i, (w, b) in enumerate(layers):
            h = ad.add(ad.matmul(h, ad.transpose(w)), b)
            if i < len(layers) - 1:
                h = ad.activation(h, spec.activation)
        return h

    c, hh, ww = spec.input_shape
    oh, ow = hh - 2, ww - 2
    f = spec.layer_sizes[0]
    w_conv, b_conv, w_fc, b_fc = params
    flat = ad.reshape(x, (n, c * hh * ww))
    patches = flat[:, _conv_index(c, hh, ww)]                       # (n, P, c*9)
    patches = ad.reshape(patches, (n * oh * ow, c * 9))
    conv = ad.add(ad.matmul(patches, ad.transpose(w_conv)), b_conv)  # (n*P, f)
    conv = ad.activation(conv, spec.activation)
    conv = ad.reshape(conv, (n, oh * ow, f))
    pooled = ad.mean(conv[:, _pool_index(oh, ow), :], axis=2)        # (n, windows, f)
    pooled = ad.reshape(pooled, (n, -1))
    return ad.add(ad.matmul(pooled, ad.transpose(w_fc)), b_fc)


def forward(state: ModelState, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    with ad.no_grad():
        return forward_tensor(state.spec, Tensor(state.theta), Tensor(x)).data


def predict(state: ModelState, inputs) -> np.ndarray:
    return forward(state, inputs).argmax(axis=1)


def loss_and_grad(state: ModelState, batch, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``theta``."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= state.spec.num_classes):
        raise ValueError(f"label out of range [0, {state.spec.num_classes})")
    theta = Tensor(state.theta, requires_grad=True)
    logits = forward_tensor(state.spec, theta, Tensor(np.asarray(batch, dtype=np.float64)))
    loss = ad.softmax_cross_entropy(logits, labels)
    return loss.item(), ad.grad(loss, theta).data
