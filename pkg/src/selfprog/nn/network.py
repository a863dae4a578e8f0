"""Runtime graphs built from specs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dsl import KERNEL_SIZE, CnnSpec, DSLError, ModelSpec, TransformerSpec
from .layers import Conv2d, Flatten, Linear, MaxPool2d, Module, ReLU, cross_entropy


class BuildError(ValueError):
    """A spec that parses but cannot be instantiated for the given task."""


@dataclass(frozen=True)
class TaskShape:
    """Input dims (height, width, channels) and class count for image tasks."""

    input_shape: tuple[int, int, int]
    num_classes: int


class Sequential(Module):
    """Feed-forward image classifier graph (NHWC input, logits output)."""

    def __init__(self, layers: list[Module], input_shape: tuple[int, int, int], num_classes: int):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.output_shape = (num_classes,)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def describe(self) -> list[str]:
        return [layer.describe() for layer in self.layers if not isinstance(layer, Flatten)]

    def loss_and_grad(self, batch) -> float:
        x, y = batch
        logits = self.forward(x)
        loss, grad = cross_entropy(logits, y)
        self.backward(grad)
        return loss

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size]).argmax(axis=-1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def param_count(graph: Module) -> int:
    return sum(p.size for p in graph.params())


def propagate_shapes(spec: CnnSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Layer-by-layer output shapes (NHWC without batch) for ``spec``."""
    h, w, c = spec.input_shape
    shapes = []
    for out_c in spec.conv_channels:
        h, w, c = h - KERNEL_SIZE + 1, w - KERNEL_SIZE + 1, out_c
        if h < 1 or w < 1:
            raise BuildError(f"conv stack reduces spatial dims to {h}x{w}")
        shapes.append(("conv", (h, w, c)))
    if spec.pool_after_convs:
        h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise BuildError("pooling reduces spatial dims below 1")
        shapes.append(("pool", (h, w, c)))
    shapes.append(("flatten", (h * w * c,)))
    for size in spec.hidden_sizes:
        shapes.append(("linear", (size,)))
    shapes.append(("linear", (spec.num_classes,)))
    return shapes


def build(spec: ModelSpec, task: TaskShape | None = None, seed: int = 0, dtype=np.float32) -> Sequential:
    """Instantiate a CNN classifier; the flatten size comes from shape propagation."""
    if isinstance(spec, TransformerSpec):
        raise BuildError("transformer specs are built with build_seq2seq")
    if task is not None:
        if tuple(task.input_shape) != tuple(spec.input_shape):
            raise BuildError(f"spec input {spec.input_shape} does not match task input {task.input_shape}")
        if task.num_classes != spec.num_classes:
            raise BuildError(f"spec has {spec.num_classes} outputs, task has {task.num_classes} classes")
    shapes = propagate_shapes(spec)
    rng = np.random.default_rng(seed)
    layers: list[Module] = []
    channels = spec.input_shape[2]
    for out_c in spec.conv_channels:
        layers.append(Conv2d(channels, out_c, rng, KERNEL_SIZE, dtype))
        channels = out_c
    if spec.pool_after_convs:
        layers.append(MaxPool2d())
    layers.append(Flatten())
    fan_in = next(s for kind, s in shapes if kind == "flatten")[0]
    for size in spec.hidden_sizes:
        layers += [Linear(fan_in, size, rng, dtype), ReLU()]
        fan_in = size
    # small output layer keeps initial logits near uniform
    layers.append(Linear(fan_in, spec.num_classes, rng, dtype, gain=0.5))
    return Sequential(layers, spec.input_shape, spec.num_classes)


def cnn_param_count(spec: CnnSpec) -> int:
    """Trainable scalars of ``build(spec)`` without building it."""
    total, channels = 0, spec.input_shape[2]
    for out_c in spec.conv_channels:
        total += out_c * channels * KERNEL_SIZE * KERNEL_SIZE + out_c
        channels = out_c
    try:
        fan_in = spec.flatten_size()
    except DSLError as exc:
        raise BuildError(str(exc)) from exc
    for size in spec.hidden_sizes + (spec.num_classes,):
        total += fan_in * size + size
        fan_in = size
    return total
