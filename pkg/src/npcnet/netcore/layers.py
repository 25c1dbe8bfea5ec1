"""Dense layers and the autoencoder used by the clustering network."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "linear"):
        bound = 1.0 / np.sqrt(n_in)
        self.W = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), name=f"{name}.W")
        self.b = Parameter(np.zeros(n_out), name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.W), self.b)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


class MLP:
    """Stack of :class:`Linear` layers.

    ``activations`` has one entry per layer; the last layer usually uses
    ``"identity"`` so the output is unconstrained.
    """

    def __init__(self, sizes: list[int], activations: list[str], rng: np.random.Generator, name: str):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        unknown = set(activations) - set(ad.ACTIVATIONS)
        if unknown:
            raise ValueError(f"unknown activation(s): {sorted(unknown)}")
        self.sizes = list(sizes)
        self.activations = list(activations)
        self.layers = [
            Linear(a, b, rng, name=f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        for i, (layer, act) in enumerate(zip(self.layers, self.activations)):
            x = ad.check_finite(ad.ACTIVATIONS[act](layer(x)), f"{self.name} layer {i}")
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class EncoderDecoder:
    """Encoder ``d -> hidden -> d_E`` with a mirrored decoder.

    Hidden layers use ``activation``; both output layers are linear.
    """

    def __init__(
        self,
        input_dim: int,
        hidden: list[int],
        embed_dim: int,
        rng: np.random.Generator,
        activation: str = "tanh",
    ):
        self.input_dim = input_dim
        self.hidden = list(hidden)
        self.embed_dim = embed_dim
        self.activation = activation
        sizes = [input_dim, *self.hidden, embed_dim]
        acts = [activation] * len(self.hidden) + ["identity"]
        self.encoder = MLP(sizes, acts, rng, "encoder")
        self.decoder = MLP(sizes[::-1], acts, rng, "decoder")

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def decode(self, e: Tensor) -> Tensor:
        return self.decoder(e)

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()
