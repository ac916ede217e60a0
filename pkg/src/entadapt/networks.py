"""Classifier networks: builders, modulated forward pass, supervised training, checkpoint IO.

Every normalization layer owns one modulation slot applied immediately after
its learned affine; with all slots at identity and stored statistics the
forward pass reproduces the frozen source model exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, read_container, write_container
from .counters import COUNTERS
from .optim import AdamState, adam_step
from .tensor import BatchNormState, NonFiniteError, Tensor

__all__ = [
    "Network",
    "TrainConfig",
    "TrainingDiverged",
    "build_from_arch",
    "build_lenet",
    "build_resnet",
    "load_checkpoint",
    "predict_probs",
    "save_checkpoint",
    "train_supervised",
]

ModulationMap = Mapping[str, tuple[Tensor, Tensor]]


class TrainingDiverged(RuntimeError):
    """Supervised training hit a non-finite loss."""


@dataclass
class ForwardContext:
    stats_mode: str = "stored"
    modulation: ModulationMap | None = None
    stats_override: Mapping[str, tuple[np.ndarray, np.ndarray]] | None = None
    capture: Callable[[str, np.ndarray], None] | None = None


class Conv2dLayer:
    def __init__(self, name, weight: Tensor, bias: Tensor, stride=1, pad=0):
        self.name = name
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class NormLayer:
    """Batch normalization plus the channel-wise modulation slot that follows it."""

    def __init__(self, name, state: BatchNormState):
        self.name = name
        self.state = state

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if ctx.capture is not None:
            ctx.capture(self.name, x.data)
        if ctx.stats_mode == "batch":
            out = T.batch_norm(x, self.state, "batch")
        else:
            stats = None
            if ctx.stats_override is not None:
                stats = ctx.stats_override.get(self.name)
            out = T.batch_norm(x, self.state, "stored", stats)
        if ctx.modulation is not None:
            slot = ctx.modulation.get(self.name)
            if slot is not None:
                out = T.affine_modulate(out, slot[0], slot[1])
        return out


class ReLULayer:
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return T.relu(x)


class AvgPoolLayer:
    def __init__(self, k: int):
        self.k = k

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return T.avg_pool(x, self.k)


class FlattenLayer:
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return T.flatten(x)


class LinearLayer:
    def __init__(self, name, weight: Tensor, bias: Tensor):
        self.name = name
        self.weight = weight
        self.bias = bias

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ResidualBlock:
    """Two-conv residual block; empty shortcut means identity."""

    def __init__(self, name, main: list, shortcut: list):
        self.name = name
        self.main = main
        self.shortcut = shortcut

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        h = x
        for layer in self.main:
            h = layer.forward(h, ctx)
        s = x
        for layer in self.shortcut:
            s = layer.forward(s, ctx)
        return T.relu(T.add(h, s))


def _walk(layers):
    for layer in layers:
        if isinstance(layer, ResidualBlock):
            yield from _walk(layer.main)
            yield from _walk(layer.shortcut)
        else:
            yield layer


class Network:
    """Frozen-parameter classifier with per-norm-layer modulation slots."""

    def __init__(self, arch: dict, layers: list, meta: dict | None = None):
        self.arch = arch
        self.layers = layers
        self.meta = dict(meta or {})

    @property
    def num_classes(self) -> int:
        return int(self.arch["num_classes"])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.arch["input_shape"])

    @property
    def input_mean(self) -> np.ndarray:
        return np.asarray(self.arch["input_mean"], dtype=np.float32)

    @property
    def input_std(self) -> np.ndarray:
        return np.asarray(self.arch["input_std"], dtype=np.float32)

    def set_input_norm(self, mean, std) -> None:
        self.arch["input_mean"] = [float(v) for v in np.atleast_1d(mean)]
        self.arch["input_std"] = [float(v) for v in np.atleast_1d(std)]

    def forward(
        self,
        batch: np.ndarray,
        stats_mode: str = "stored",
        modulation: ModulationMap | None = None,
        stats_override: Mapping[str, tuple[np.ndarray, np.ndarray]] | None = None,
        capture: Callable[[str, np.ndarray], None] | None = None,
    ) -> Tensor:
        batch = np.asarray(batch, dtype=np.float32)
        if batch.ndim != 4 or batch.shape[1:] != self.input_shape:
            raise ValueError(
                f"batch shape {batch.shape} does not match input shape {self.input_shape}"
            )
        if modulation is not None:
            known = set(self.norm_channels())
            unknown = set(modulation) - known
            if unknown:
                raise ValueError(f"modulation refers to unknown layers: {sorted(unknown)}")
        if T.grad_enabled():
            COUNTERS.gradient_examples += batch.shape[0]
        else:
            COUNTERS.inference_examples += batch.shape[0]
        mean = self.input_mean[None, :, None, None]
        std = self.input_std[None, :, None, None]
        h = Tensor((batch - mean) / std)
        ctx = ForwardContext(stats_mode, modulation, stats_override, capture)
        for layer in self.layers:
            h = layer.forward(h, ctx)
        return h

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for layer in _walk(self.layers):
            if isinstance(layer, (Conv2dLayer, LinearLayer)):
                params[f"{layer.name}.weight"] = layer.weight
                params[f"{layer.name}.bias"] = layer.bias
            elif isinstance(layer, NormLayer):
                params[f"{layer.name}.gamma"] = layer.state.gamma
                params[f"{layer.name}.beta"] = layer.state.beta
        return params

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def norm_layers(self) -> list[NormLayer]:
        return [l for l in _walk(self.layers) if isinstance(l, NormLayer)]

    def norm_channels(self) -> dict[str, int]:
        return {l.name: l.state.channels for l in self.norm_layers()}

    def stats(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {
            l.name: (l.state.mean.copy(), l.state.var.copy()) for l in self.norm_layers()
        }

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag

    def copy(self) -> "Network":
        import copy as _copy

        clone = build_from_arch(_copy.deepcopy(self.arch))
        clone.meta = dict(self.meta)
        src, dst = self.parameters(), clone.parameters()
        for name, p in src.items():
            dst[name].data = p.data.copy()
        for a, b in zip(self.norm_layers(), clone.norm_layers()):
            b.state.replace_stats(a.state.mean.copy(), a.state.var.copy())
        return clone


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _conv_init(rng, co, ci, kh, kw):
    std = np.sqrt(2.0 / (ci * kh * kw))
    return rng.normal(0.0, std, size=(co, ci, kh, kw)).astype(np.float32)


def _make_conv(rng, name, ci, co, k, stride=1, pad=0):
    return Conv2dLayer(
        name,
        Tensor(_conv_init(rng, co, ci, k, k)),
        Tensor(np.zeros(co, np.float32)),
        stride,
        pad,
    )


def _make_norm(name, c):
    return NormLayer(
        name,
        BatchNormState(
            mean=np.zeros(c, np.float32),
            var=np.ones(c, np.float32),
            gamma=Tensor(np.ones(c, np.float32)),
            beta=Tensor(np.zeros(c, np.float32)),
        ),
    )


def _make_linear(rng, name, fin, fout):
    std = np.sqrt(1.0 / fin)
    return LinearLayer(
        name,
        Tensor(rng.normal(0.0, std, size=(fout, fin)).astype(np.float32)),
        Tensor(np.zeros(fout, np.float32)),
    )


def _check_input_shape(input_shape):
    if len(input_shape) != 3:
        raise ValueError(f"input shape must be (C, H, W), got {input_shape}")
    c, h, w = input_shape
    if h < 16 or w < 16:
        raise ValueError(f"input spatial extent must be >= 16, got {h}x{w}")
    return c, h, w


def build_lenet(input_shape=(1, 28, 28), num_classes=10, seed=0, channels=(8, 16)) -> Network:
    """Small conv-norm-relu-pool x2 classifier with a linear head."""
    c, h, w = _check_input_shape(input_shape)
    if h % 4 or w % 4:
        raise ValueError("lenet needs spatial extents divisible by 4")
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    layers = [
        _make_conv(rng, "conv1", c, c1, 5, 1, 2),
        _make_norm("n1", c1),
        ReLULayer(),
        AvgPoolLayer(2),
        _make_conv(rng, "conv2", c1, c2, 5, 1, 2),
        _make_norm("n2", c2),
        ReLULayer(),
        AvgPoolLayer(2),
        FlattenLayer(),
        _make_linear(rng, "fc", c2 * (h // 4) * (w // 4), num_classes),
    ]
    arch = {
        "family": "lenet",
        "input_shape": list(input_shape),
        "num_classes": num_classes,
        "seed": seed,
        "channels": list(channels),
        "input_mean": [0.0] * c,
        "input_std": [1.0] * c,
    }
    return Network(arch, layers)


def _residual_block(rng, name, ci, co, stride):
    main = [
        _make_conv(rng, f"{name}.c1", ci, co, 3, stride, 1),
        _make_norm(f"{name}.n1", co),
        ReLULayer(),
        _make_conv(rng, f"{name}.c2", co, co, 3, 1, 1),
        _make_norm(f"{name}.n2", co),
    ]
    shortcut = []
    if stride != 1 or ci != co:
        shortcut = [
            _make_conv(rng, f"{name}.sc.c", ci, co, 1, stride, 0),
            _make_norm(f"{name}.sc.n", co),
        ]
    return ResidualBlock(name, main, shortcut)


def build_resnet(
    depth_blocks=2, width=1, input_shape=(1, 28, 28), num_classes=10, seed=0
) -> Network:
    """Residual classifier: stem + 3 stages of `depth_blocks` blocks at widths 8/16/32 x width.

    The stem pools early so stage 1 runs at half resolution, which keeps
    desk-scale training fast.
    """
    if depth_blocks < 1:
        raise ValueError("depth_blocks must be >= 1")
    if width < 1:
        raise ValueError("width must be >= 1")
    c, h, w = _check_input_shape(input_shape)
    if h != w or h % 2:
        raise ValueError("resnet needs square inputs with even extent")
    rng = np.random.default_rng(seed)
    widths = [8 * width, 16 * width, 32 * width]
    layers: list = [
        _make_conv(rng, "stem.c", c, widths[0], 3, 1, 1),
        _make_norm("stem.n", widths[0]),
        ReLULayer(),
        AvgPoolLayer(2),
    ]
    size = h // 2
    ci = widths[0]
    for stage, co in enumerate(widths, start=1):
        for block in range(depth_blocks):
            stride = 2 if stage > 1 and block == 0 else 1
            layers.append(_residual_block(rng, f"s{stage}b{block}", ci, co, stride))
            if stride == 2:
                size = (size + 2 - 3) // 2 + 1
            ci = co
    layers += [AvgPoolLayer(size), FlattenLayer(), _make_linear(rng, "fc", widths[2], num_classes)]
    arch = {
        "family": "resnet",
        "input_shape": list(input_shape),
        "num_classes": num_classes,
        "seed": seed,
        "depth_blocks": depth_blocks,
        "width": width,
        "input_mean": [0.0] * c,
        "input_std": [1.0] * c,
    }
    return Network(arch, layers)


def build_from_arch(arch: dict) -> Network:
    family = arch.get("family")
    if family == "lenet":
        net = build_lenet(
            tuple(arch["input_shape"]),
            arch["num_classes"],
            arch.get("seed", 0),
            tuple(arch.get("channels", (8, 16))),
        )
    elif family == "resnet":
        net = build_resnet(
            arch.get("depth_blocks", 2),
            arch.get("width", 1),
            tuple(arch["input_shape"]),
            arch["num_classes"],
            arch.get("seed", 0),
        )
    else:
        raise ValueError(f"unknown architecture family {family!r}")
    net.arch = dict(arch)
    return net


# ---------------------------------------------------------------------------
# Inference helper
# ---------------------------------------------------------------------------


def predict_probs(
    net: Network,
    images: np.ndarray,
    batch_size: int = 256,
    modulation: ModulationMap | None = None,
    stats_override: Mapping[str, tuple[np.ndarray, np.ndarray]] | None = None,
) -> np.ndarray:
    """Batched softmax predictions with stored (or overridden) statistics."""
    n = images.shape[0]
    out = np.zeros((n, net.num_classes), dtype=np.float32)
    with T.no_grad():
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            logits = net.forward(
                images[start:stop],
                stats_mode="stored",
                modulation=modulation,
                stats_override=stats_override,
            )
            out[start:stop] = T.softmax_probs(logits).data
    return out


# ---------------------------------------------------------------------------
# Supervised training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 4
    learning_rate: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    stats_momentum: float = 0.1  # EMA weight of the current batch moments

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0 < self.stats_momentum <= 1:
            raise ValueError("stats momentum must be in (0, 1]")


def train_supervised(net: Network, dataset, config: TrainConfig) -> Network:
    """Cross-entropy Adam training with batch statistics; stores EMA statistics for inference.

    Mutates `net` in place and records seed/epochs/final train accuracy in
    `net.meta`. Zero epochs leaves the network untouched.
    """
    from .datasets import BatchPlan, batches  # local import avoids a cycle

    config.validate()
    if dataset.labels is None:
        raise ValueError("supervised training needs labels")
    if int(dataset.labels.max(initial=0)) >= net.num_classes:
        raise ValueError("dataset labels exceed the network's class count")
    if config.epochs == 0:
        return net

    net.set_input_norm(dataset.input_mean, dataset.input_std)
    params = net.parameters()
    net.set_trainable(True)
    norm_by_name = {l.name: l for l in net.norm_layers()}
    momentum = config.stats_momentum

    def ema_capture(name: str, data: np.ndarray) -> None:
        mean, var = T.channel_moments(data)
        state = norm_by_name[name].state
        state.replace_stats(
            (1.0 - momentum) * state.mean + momentum * mean,
            (1.0 - momentum) * state.var + momentum * var,
        )

    adam = AdamState()
    step = 0
    try:
        for epoch in range(config.epochs):
            plan = BatchPlan(config.batch_size, seed=config.seed * 100003 + epoch)
            for _, bx, by in batches(dataset, plan):
                try:
                    logits = net.forward(bx, stats_mode="batch", capture=ema_capture)
                    loss = T.cross_entropy_loss(logits, by)
                except NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"non-finite loss at step {step} (epoch {epoch}): {exc}"
                    ) from exc
                grads = T.backward(loss, params)
                adam_step(params, grads, adam, config.learning_rate)
                step += 1
    finally:
        net.set_trainable(False)

    probs = predict_probs(net, dataset.images, config.batch_size)
    accuracy = float((probs.argmax(axis=1) == dataset.labels).mean())
    net.meta.update(
        {
            "seed": config.seed,
            "epochs": config.epochs,
            "final_train_accuracy": accuracy,
        }
    )
    return net


# ---------------------------------------------------------------------------
# Checkpoint IO
# ---------------------------------------------------------------------------


def save_checkpoint(net: Network, path) -> None:
    tensors = {name: p.data for name, p in net.parameters().items()}
    for layer in net.norm_layers():
        tensors[f"{layer.name}.running_mean"] = layer.state.mean
        tensors[f"{layer.name}.running_var"] = layer.state.var
    write_container(path, {"kind": "network", "arch": net.arch, "meta": net.meta}, tensors)


def load_checkpoint(path) -> Network:
    descriptor, tensors = read_container(path)
    if descriptor.get("kind") != "network":
        raise CheckpointError(f"container holds {descriptor.get('kind')!r}, not a network")
    net = build_from_arch(descriptor["arch"])
    net.meta = dict(descriptor.get("meta", {}))
    params = net.parameters()
    expected = set(params)
    for layer in net.norm_layers():
        expected.add(f"{layer.name}.running_mean")
        expected.add(f"{layer.name}.running_var")
    if expected != set(tensors):
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise CheckpointError(f"tensor records mismatch: missing {missing}, extra {extra}")
    for name, p in params.items():
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}")
        p.data = tensors[name].astype(np.float32)
    for layer in net.norm_layers():
        layer.state.replace_stats(
            tensors[f"{layer.name}.running_mean"], tensors[f"{layer.name}.running_var"]
        )
    return net
