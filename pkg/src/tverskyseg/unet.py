"""UNet-3D and Dilated UNet-3D over the recording op graph.

Layout per stage ``s`` of the contracting path (channels ``base * 2**s``)::

    conv3x3x3 + ReLU -> conv3x3x3 + ReLU -> downsample (2x2x2, stride 2)

then a bottleneck, and a mirrored expanding path of 2x2x2 stride-2
transposed convs, skip concatenation and two conv+ReLU blocks per stage.
A 1x1x1 conv produces two logits that go through a channel softmax.

The dilated variant keeps the bottleneck's entry conv and replaces its
second conv with a cascade of dilated 3x3x3 convs whose ReLU outputs are
summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import ShapeError
from .tensor import OpGraph, Tensor, backward


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    out_classes: int = 2
    downsample_mode: str = "strided_conv"
    dilated_bottleneck: bool = False
    bottleneck_dilations: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.downsample_mode not in ("strided_conv", "max_pool"):
            raise ValueError(f"unknown downsample_mode {self.downsample_mode!r}")
        if self.dilated_bottleneck and not self.bottleneck_dilations:
            raise ValueError("bottleneck_dilations must be non-empty for a dilated bottleneck")
        if any(d < 1 for d in self.bottleneck_dilations):
            raise ValueError(f"dilations must be >= 1, got {self.bottleneck_dilations}")

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    def bottleneck_receptive_field(self) -> int:
        """Per-axis receptive field of the dilated cascade: 1 + sum(2 * d)."""
        if not self.dilated_bottleneck:
            return 0
        return 1 + sum(2 * d for d in self.bottleneck_dilations)

    def min_input_extent(self) -> int:
        """Smallest valid per-axis input extent for this configuration."""
        return max(1, self.bottleneck_receptive_field()) * self.divisor


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    graph: OpGraph | None = None

    # -- parameters ----------------------------------------------------------

    def _add(self, name, shape):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = Tensor(np.zeros(shape, dtype=np.float32), name=name)

    def _add_conv(self, name, cin, cout, k):
        self._add(f"{name}.weight", (cout, cin, k, k, k))
        self._add(f"{name}.bias", (cout,))

    def _add_tconv(self, name, cin, cout, k):
        self._add(f"{name}.weight", (cin, cout, k, k, k))
        self._add(f"{name}.bias", (cout,))

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def astype(self, dtype) -> "Model":
        """Copy of the model with parameters cast to ``dtype``."""
        params = {n: Tensor(t.data.astype(dtype), name=n) for n, t in self.params.items()}
        return Model(self.config, params)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            if arr.shape != self.params[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != {self.params[name].shape}")
            self.params[name].data = np.ascontiguousarray(arr, dtype=self.params[name].dtype)

    # -- evaluation ----------------------------------------------------------

    def check_input(self, shape) -> None:
        if len(shape) != 5 or shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected input (N, {self.config.in_channels}, D, H, W), got {tuple(shape)}"
            )
        div = self.config.divisor
        for axis, size in zip("DHW", shape[2:]):
            if size % div:
                pad = -size % div
                raise ShapeError(
                    f"axis {axis}: extent {size} is not divisible by {div} (2**depth); "
                    f"pad by {pad} to {size + pad}"
                )
        rf = self.config.bottleneck_receptive_field()
        if rf:
            bottom = min(shape[2:]) // div
            if bottom < rf:
                raise ShapeError(
                    f"dilated bottleneck receptive field {rf} exceeds bottleneck extent {bottom}; "
                    f"inputs need at least {self.config.min_input_extent()} voxels per axis"
                )

    def forward(self, batch, zero_skips=()) -> Tensor:
        """Run the network; returns channel-softmax probabilities.

        The graph of this pass is kept on ``self.graph`` for :meth:`backward`.
        ``zero_skips`` lists stage indices whose skip feature maps are replaced
        by zeros (ablation only).
        """
        dtype = next(iter(self.params.values())).dtype
        x = Tensor(batch.data if isinstance(batch, Tensor) else batch, dtype=dtype)
        self.check_input(x.shape)
        cfg = self.config
        P = self.params
        g = OpGraph()

        def conv(h, name, padding=1, dilation=1, stride=1):
            return g.conv3d(h, P[f"{name}.weight"], P[f"{name}.bias"], stride, padding, dilation)

        h = x
        skips = []
        for s in range(cfg.depth):
            h = g.relu(conv(h, f"enc{s}.conv1"))
            h = g.relu(conv(h, f"enc{s}.conv2"))
            if s in zero_skips:
                skips.append(Tensor(np.zeros_like(h.data)))
            else:
                skips.append(h)
            if cfg.downsample_mode == "max_pool":
                h = g.maxpool3d(h, 2)
            else:
                h = conv(h, f"enc{s}.down", padding=0, stride=2)

        h = g.relu(conv(h, "bottleneck.conv1"))
        if cfg.dilated_bottleneck:
            total = None
            for i, d in enumerate(cfg.bottleneck_dilations):
                h = g.relu(conv(h, f"bottleneck.conv{i + 2}", padding=d, dilation=d))
                total = h if total is None else g.add(total, h)
            h = total
        else:
            h = g.relu(conv(h, "bottleneck.conv2"))

        for s in reversed(range(cfg.depth)):
            h = g.transposed_conv3d(h, P[f"dec{s}.up.weight"], P[f"dec{s}.up.bias"], stride=2)
            h = g.concat_channels(skips[s], h)
            h = g.relu(conv(h, f"dec{s}.conv1"))
            h = g.relu(conv(h, f"dec{s}.conv2"))

        logits = conv(h, "head", padding=0)
        probs = g.softmax_channels(logits)
        self.graph = g
        return probs

    def backward(self, loss_grad) -> dict[str, np.ndarray]:
        if self.graph is None:
            raise RuntimeError("backward called before forward")
        grads = backward(self.graph, loss_grad)
        return {n: grads[n] for n in self.params}


def _build(config: ModelConfig) -> Model:
    m = Model(config)
    c = config.stage_channels
    cin = config.in_channels
    for s in range(config.depth):
        m._add_conv(f"enc{s}.conv1", cin, c(s), 3)
        m._add_conv(f"enc{s}.conv2", c(s), c(s), 3)
        if config.downsample_mode == "strided_conv":
            m._add_conv(f"enc{s}.down", c(s), c(s), 2)
        cin = c(s)
    cb = c(config.depth)
    m._add_conv("bottleneck.conv1", cin, cb, 3)
    if config.dilated_bottleneck:
        for i, _ in enumerate(config.bottleneck_dilations):
            m._add_conv(f"bottleneck.conv{i + 2}", cb, cb, 3)
    else:
        m._add_conv("bottleneck.conv2", cb, cb, 3)
    cin = cb
    for s in reversed(range(config.depth)):
        m._add_tconv(f"dec{s}.up", cin, c(s), 2)
        m._add_conv(f"dec{s}.conv1", 2 * c(s), c(s), 3)
        m._add_conv(f"dec{s}.conv2", c(s), c(s), 3)
        cin = c(s)
    m._add_conv("head", cin, config.out_classes, 1)
    return m


def build_unet3d(config: ModelConfig = ModelConfig()) -> Model:
    if config.dilated_bottleneck:
        return build_dilated_unet3d(config)
    return _build(config)


def build_dilated_unet3d(config: ModelConfig, input_extent: int | None = None) -> Model:
    """Dilated-bottleneck UNet-3D.

    When ``input_extent`` is given, configurations whose bottleneck is smaller
    than the cascade's receptive field are rejected up front.
    """
    if not config.dilated_bottleneck:
        raise ValueError("config.dilated_bottleneck must be set")
    if input_extent is not None:
        bottom = input_extent // config.divisor
        rf = config.bottleneck_receptive_field()
        if bottom < rf:
            raise ShapeError(
                f"bottleneck extent {bottom} is smaller than the dilated receptive field {rf}; "
                f"minimum input extent is {config.min_input_extent()}"
            )
    return _build(config)


def _fan_in(name: str, shape) -> int:
    if name.endswith(".up.weight"):
        cin, _, k = shape[0], shape[1], shape[2]
    else:
        cin, k = shape[1], shape[2]
    return cin * k ** 3


def init_params(model: Model, seed: int) -> Model:
    """He-normal weights (variance 2 / fan_in), zero biases, in parameter order."""
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.endswith(".bias"):
            t.data = np.zeros(t.shape, dtype=t.dtype)
        else:
            std = np.sqrt(2.0 / _fan_in(name, t.shape))
            t.data = (rng.standard_normal(t.shape) * std).astype(t.dtype)
    return model


def forward(model: Model, batch) -> Tensor:
    return model.forward(batch)
