"""Feed-forward classifier built from dense and adapter layers."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import rng as rngmod
from .adapters import AdaLoraLayer, Dense, LoraLayer, MaskSet
from .errors import ConfigError, DimensionError
from .tensor import Node, constant, relu, sub


class Model:
    """Layers applied in order with ReLU between them; the last layer emits logits.

    The values of every parameter at construction time are kept as the
    immutable snapshot ``theta0``. ``delta_nodes`` expresses the current
    trainable change relative to that snapshot: for adapter layers it is the
    merged product (zero at initialisation), for trainable dense layers the
    difference from the snapshot.
    """

    def __init__(self, layers: Sequence):
        if not layers:
            raise ConfigError("a model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n1 != nxt.n2:
                raise DimensionError(f"layer widths do not chain: {prev.n1} -> {nxt.n2}")
        self.layers = list(layers)
        self.theta0 = self._snapshot()

    def _snapshot(self) -> tuple[np.ndarray, ...]:
        values = []
        for layer in self.layers:
            for node in layer.frozen_parameters() + layer.parameters():
                v = node.value.copy()
                v.setflags(write=False)
                values.append(v)
        return tuple(values)

    @property
    def input_dim(self) -> int:
        return self.layers[0].n2

    @property
    def output_dim(self) -> int:
        return self.layers[-1].n1

    def parameters(self) -> list[Node]:
        return [p for layer in self.layers for p in layer.parameters()]

    def frozen_parameters(self) -> list[Node]:
        return [p for layer in self.layers for p in layer.frozen_parameters()]

    def forward(self, x, mask_set: MaskSet | None = None) -> Node:
        h = x if isinstance(x, Node) else constant(x)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            mask = mask_set[i] if mask_set is not None else None
            h = layer.forward(h, mask)
            if i < last:
                h = relu(h)
        return h

    __call__ = forward

    def logits(self, x, mask_set: MaskSet | None = None) -> np.ndarray:
        return self.forward(x, mask_set).value

    def delta_nodes(self) -> list[Node]:
        nodes = []
        k = 0
        for layer in self.layers:
            frozen = layer.frozen_parameters()
            trainable = layer.parameters()
            if layer.adapted:
                nodes.append(layer.merged_delta())
            else:
                for j, node in enumerate(trainable):
                    ref = self.theta0[k + len(frozen) + j]
                    nodes.append(sub(node, constant(ref)))
            k += len(frozen) + len(trainable)
        return nodes

    def delta_vector(self) -> np.ndarray:
        """Flattened current ``Delta theta`` (entries of merged adapter deltas)."""
        parts = [n.value.reshape(-1) for n in self.delta_nodes()]
        return np.concatenate(parts) if parts else np.zeros(0)


def mlp(widths: Sequence[int], rng: np.random.Generator) -> Model:
    """Fresh fully trainable MLP with the given layer widths (input first)."""
    if len(widths) < 2:
        raise ConfigError("widths must list at least input and output sizes")
    return Model([Dense.init(a, b, rng) for a, b in zip(widths, widths[1:])])


def with_adapters(
    pretrained: Model,
    kind: str,
    rank: int,
    seed: int,
    scale: float = 1.0,
    train_head: bool = False,
) -> Model:
    """Wrap every dense layer of ``pretrained`` in a frozen-base adapter.

    The rank of each adapter is ``min(rank, n1, n2)`` so narrow layers such
    as the class head stay valid. With ``train_head`` the last layer is kept
    as a trainable dense layer instead of being adapted.
    """
    if kind not in ("lora", "adalora"):
        raise ConfigError(f"unknown adapter kind {kind!r}")
    cls = LoraLayer if kind == "lora" else AdaLoraLayer
    layers = []
    last = len(pretrained.layers) - 1
    for i, layer in enumerate(pretrained.layers):
        W = layer.W0.value if layer.adapted else layer.W.value
        b = (layer.b0 if layer.adapted else layer.b).value.reshape(-1)
        if i == last and train_head:
            layers.append(Dense(W.copy(), b.copy(), trainable=True))
            continue
        r = min(rank, layer.n1, layer.n2)
        g = rngmod.derive(seed, rngmod.INIT, i)
        layers.append(cls.init(W.copy(), r, g, b0=b.copy(), scale=scale))
    return Model(layers)
