"""Generic feed-forward blocks shared by the scorer, pre-processors and attacks."""

from __future__ import annotations

import numpy as np

from .kernel import ParameterBundle, Tensor, activation, dropout, glorot


class MLP:
    """Fully connected network over batch rows.

    ``dims`` runs input -> hidden... -> output; hidden layers use relu with
    optional inverted dropout, the output layer uses ``out_activation``.
    """

    def __init__(self, dims, out_activation="identity", dropout_rate=0.0, rng=None, bundle=None, prefix=""):
        if rng is None:
            rng = np.random.default_rng(0)
        self.dims = tuple(dims)
        self.out_activation = out_activation
        self.dropout_rate = dropout_rate
        self.bundle = bundle if bundle is not None else ParameterBundle()
        self._layers = []
        own_bundle = bundle is None
        for i, (n_in, n_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            W = self.bundle.add(f"{prefix}W{i}", glorot(rng, (n_in, n_out)))
            b = self.bundle.add(f"{prefix}b{i}", np.zeros(n_out))
            self._layers.append((W, b))
        if own_bundle:
            self.bundle.freeze()

    def forward(self, x, train=False, rng=None):
        x = Tensor._lift(x)
        last = len(self._layers) - 1
        for i, (W, b) in enumerate(self._layers):
            x = x @ W + b
            if i < last:
                x = activation("relu", x)
                x = dropout(x, self.dropout_rate, rng, train)
            else:
                x = activation(self.out_activation, x)
        return x

    def predict(self, x):
        """Deterministic forward pass on raw numpy input."""
        return self.forward(Tensor(np.asarray(x, dtype=np.float64))).data
