"""Masked-parameter layers and the two reference architectures.

Every weight tensor w is paired with an auxiliary tensor c of the same
shape; the forward pass always uses the effective weight w*c. Biases
are never masked and never count toward the maskable total.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add_bias,
    conv2d,
    ewise_mul,
    flatten,
    matmul,
    maxpool2,
    relu,
)


class StateError(RuntimeError):
    """Operation invoked in the wrong parameter lifecycle mode."""


class Mode(enum.Enum):
    DENSE = "dense"
    MASK_LEARNING = "mask-learning"
    FROZEN_MASK = "frozen-mask"


class MaskedParameter:
    """A weight tensor paired with its auxiliary mask tensor.

    Modes: DENSE keeps c identically 1 and gradient-free; MASK_LEARNING
    trains c jointly with w; FROZEN_MASK pins c to a binary pattern and
    keeps w zero wherever c is zero.
    """

    def __init__(self, name: str, w: Tensor):
        self.name = name
        self.w = w
        self.c = Tensor(np.ones_like(w.data))
        self.mode = Mode.DENSE
        self.w.requires_grad = True

    @property
    def size(self) -> int:
        return self.w.size

    def effective(self, tape: Tape | None) -> Tensor:
        return ewise_mul(self.w, self.c, tape)

    def start_mask_learning(self) -> None:
        self.c = Tensor(np.ones_like(self.w.data), requires_grad=True)
        self.mode = Mode.MASK_LEARNING

    def freeze_mask(self, keep: np.ndarray) -> None:
        """Pin c to the binary pattern ``keep`` and zero pruned weights."""
        binary = (np.asarray(keep) != 0).astype(self.w.data.dtype)
        if binary.shape != self.w.shape:
            raise ShapeError(f"mask shape {binary.shape} vs weight {self.w.shape}")
        self.c = Tensor(binary)
        self.w.data *= binary
        self.mode = Mode.FROZEN_MASK


# Layer descriptors. Shapes compose at model construction time.


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    has_bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    in_channels: int
    kh: int
    kw: int
    has_bias: bool = True


@dataclass(frozen=True)
class MaxPool2:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


def _propagate(shape, layer):
    """Output shape of `layer` on input `shape` (without the batch axis)."""
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise ShapeError(f"dense expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"conv expects (C={layer.in_channels},H,W), got {shape}")
        c, h, w = shape
        if layer.kh > h or layer.kw > w:
            raise ShapeError(f"kernel {layer.kh}x{layer.kw} larger than input {h}x{w}")
        return (layer.out_channels, h - layer.kh + 1, w - layer.kw + 1)
    if isinstance(layer, MaxPool2):
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise ShapeError(f"maxpool2 needs even (C,H,W), got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, ReLU):
        return shape
    raise TypeError(f"unknown layer {layer!r}")


def _init_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


class Model:
    """Ordered layer list with named masked weights and plain biases."""

    def __init__(self, arch: str, input_shape: tuple[int, ...], layers: list, seed: int = 0):
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)
        self.masked: dict[str, MaskedParameter] = {}
        self.biases: dict[str, Tensor] = {}
        self._build(seed)

    def _build(self, seed: int) -> None:
        shape = self.input_shape
        idx = 0
        for pos, layer in enumerate(self.layers):
            shape = _propagate(shape, layer)
            if isinstance(layer, (Dense, Conv2d)):
                idx += 1
                feeds_relu = pos + 1 < len(self.layers) and isinstance(
                    self.layers[pos + 1], ReLU
                )
                rng = _init_rng(seed, idx)
                if isinstance(layer, Dense):
                    name = f"fc{sum(isinstance(l, Dense) for l in self.layers[: pos + 1])}"
                    fan_in = layer.in_features
                    wshape = (layer.in_features, layer.out_features)
                    bshape = (layer.out_features,)
                else:
                    name = f"conv{sum(isinstance(l, Conv2d) for l in self.layers[: pos + 1])}"
                    fan_in = layer.in_channels * layer.kh * layer.kw
                    wshape = (layer.out_channels, layer.in_channels, layer.kh, layer.kw)
                    bshape = (layer.out_channels,)
                # Kaiming-uniform (ReLU gain) where a ReLU follows,
                # +-1/sqrt(fan_in) for linear-output layers.
                bound = np.sqrt(6.0 / fan_in) if feeds_relu else 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=wshape).astype(np.float32)
                self.masked[f"{name}.weight"] = MaskedParameter(f"{name}.weight", Tensor(w, requires_grad=True))
                if layer.has_bias:
                    bias = Tensor(np.zeros(bshape, dtype=np.float32), requires_grad=True)
                    self.biases[f"{name}.bias"] = bias
        self.output_shape = shape

    # -- shape/accounting ------------------------------------------------

    def maskable_count(self) -> int:
        """Total weight elements across masked tensors (biases excluded)."""
        return sum(p.size for p in self.masked.values())

    def parameter_count(self) -> int:
        """Weights plus biases, the headline parameter total."""
        return self.maskable_count() + sum(t.size for t in self.biases.values())

    def named_weights(self):
        for name, p in self.masked.items():
            yield name, p.w

    def named_masks(self):
        for name, p in self.masked.items():
            yield name, p.c

    def named_biases(self):
        yield from self.biases.items()

    def named_parameters(self):
        yield from self.named_weights()
        yield from self.named_biases()

    @property
    def mode(self) -> Mode:
        modes = {p.mode for p in self.masked.values()}
        if len(modes) != 1:
            raise StateError(f"inconsistent parameter modes {modes}")
        return next(iter(modes))

    # -- lifecycle --------------------------------------------------------

    def start_mask_learning(self) -> None:
        for p in self.masked.values():
            p.start_mask_learning()

    def zero_grad(self) -> None:
        for p in self.masked.values():
            p.w.zero_grad()
            p.c.zero_grad()
        for b in self.biases.values():
            b.zero_grad()

    def astype(self, dtype) -> "Model":
        """Deep copy with every parameter cast (float64 clone for oracles)."""
        m = self.clone()
        for p in m.masked.values():
            p.w = Tensor(p.w.data.astype(dtype), requires_grad=p.w.requires_grad)
            p.c = Tensor(p.c.data.astype(dtype), requires_grad=p.c.requires_grad)
        for name, b in list(m.biases.items()):
            m.biases[name] = Tensor(b.data.astype(dtype), requires_grad=b.requires_grad)
        return m

    def clone(self) -> "Model":
        m = Model.__new__(Model)
        m.arch = self.arch
        m.input_shape = self.input_shape
        m.output_shape = self.output_shape
        m.layers = list(self.layers)
        m.masked = {}
        m.biases = {}
        for name, p in self.masked.items():
            q = MaskedParameter(name, Tensor(p.w.data.copy()))
            q.w.requires_grad = p.w.requires_grad
            q.c = Tensor(p.c.data.copy(), requires_grad=p.c.requires_grad)
            q.mode = p.mode
            m.masked[name] = q
        for name, b in self.biases.items():
            m.biases[name] = Tensor(b.data.copy(), requires_grad=b.requires_grad)
        return m

    # -- forward ----------------------------------------------------------

    def forward(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input {x.shape[1:]} does not match {self.input_shape}")
        h = x
        fc = conv = 0
        for layer in self.layers:
            if isinstance(layer, Dense):
                fc += 1
                p = self.masked[f"fc{fc}.weight"]
                h = matmul(h, p.effective(tape), tape)
                if layer.has_bias:
                    h = add_bias(h, self.biases[f"fc{fc}.bias"], tape)
            elif isinstance(layer, Conv2d):
                conv += 1
                p = self.masked[f"conv{conv}.weight"]
                bias = self.biases.get(f"conv{conv}.bias")
                if bias is None:
                    bias = Tensor(np.zeros(layer.out_channels, dtype=h.data.dtype))
                h = conv2d(h, p.effective(tape), bias, tape)
            elif isinstance(layer, MaxPool2):
                h = maxpool2(h, tape)
            elif isinstance(layer, ReLU):
                h = relu(h, tape)
            elif isinstance(layer, Flatten):
                h = flatten(h, tape)
        return h


def apply_threshold(model: Model, epsilon: float, update_weights: bool = True) -> None:
    """Binarize masks: w <- w*c (unless disabled), then c <- 1(c > epsilon).

    Pruned coordinates end exactly zero in w. ``update_weights=False`` is
    the rewind variant, which binarizes c only.
    """
    for p in model.masked.values():
        if p.mode is not Mode.MASK_LEARNING:
            raise StateError(f"apply_threshold in mode {p.mode}")
    for p in model.masked.values():
        if update_weights:
            p.w.data *= p.c.data
        p.freeze_mask(p.c.data > epsilon)


def sparsity_report(model: Model) -> list[tuple[str, int, int, float]]:
    """Per-layer (name, total, nonzero, remaining%) plus a TOTAL row."""
    rows = []
    total = nonzero = 0
    for name, p in model.masked.items():
        nz = int(np.count_nonzero(p.c.data))
        rows.append((name, p.size, nz, 100.0 * nz / p.size))
        total += p.size
        nonzero += nz
    rows.append(("TOTAL", total, nonzero, 100.0 * nonzero / total))
    return rows


# -- reference architectures ----------------------------------------------


def build_lenet300(seed: int = 0) -> Model:
    """784-300-100-10 MLP with ReLU between dense layers."""
    layers = [
        Flatten(),
        Dense(784, 300),
        ReLU(),
        Dense(300, 100),
        ReLU(),
        Dense(100, 10),
    ]
    return Model("lenet300", (1, 28, 28), layers, seed=seed)


def build_lenet5_caffe(seed: int = 0) -> Model:
    """conv20@5x5 - pool - conv50@5x5 - pool - 800-500-10 head."""
    layers = [
        Conv2d(20, 1, 5, 5),
        MaxPool2(),
        Conv2d(50, 20, 5, 5),
        MaxPool2(),
        Flatten(),
        Dense(800, 500),
        ReLU(),
        Dense(500, 10),
    ]
    return Model("lenet5-caffe", (1, 28, 28), layers, seed=seed)


def build_mlp(dims: list[int], seed: int = 0, bias: bool = True) -> Model:
    """Fully connected ReLU network over arbitrary layer widths."""
    if len(dims) < 2:
        raise ShapeError("mlp needs at least input and output widths")
    layers: list = [Flatten()]
    for i in range(len(dims) - 1):
        layers.append(Dense(dims[i], dims[i + 1], has_bias=bias))
        if i < len(dims) - 2:
            layers.append(ReLU())
    arch = "mlp:" + ",".join(str(d) for d in dims) + ("" if bias else ":nobias")
    return Model(arch, (dims[0],), layers, seed=seed)


def build_model(arch: str, seed: int = 0) -> Model:
    """Construct a model from its architecture string."""
    if arch == "lenet300":
        return build_lenet300(seed)
    if arch == "lenet5-caffe":
        return build_lenet5_caffe(seed)
    if arch.startswith("mlp:"):
        parts = arch.split(":")
        dims = [int(d) for d in parts[1].split(",")]
        bias = not (len(parts) > 2 and parts[2] == "nobias")
        return build_mlp(dims, seed=seed, bias=bias)
    raise ValueError(f"unknown architecture {arch!r}")
