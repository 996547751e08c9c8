"""Xavier-style initialization corrected for layer sparsity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .topology import Topology

__all__ = ["InitSpec", "SPARSE_XAVIER", "PLAIN_XAVIER", "sparse_xavier_bound",
           "xavier_bound", "init_weights"]

SPARSE_XAVIER = "sparse_xavier"
PLAIN_XAVIER = "plain_xavier"


@dataclass(frozen=True)
class InitSpec:
    scheme: str = SPARSE_XAVIER
    seed: int = 0
    # constant edges consume their share of the layer's variance budget
    constant_budget: bool = True

    def __post_init__(self):
        if self.scheme not in (SPARSE_XAVIER, PLAIN_XAVIER):
            raise ValueError(f"unknown init scheme {self.scheme!r}")


def xavier_bound(n_in: int, n_out: int) -> float:
    return math.sqrt(6.0) / math.sqrt(n_in + n_out)


def sparse_xavier_bound(n_in: int, n_out: int, s: float) -> float:
    """Half-width of the uniform draw for a layer with sparsity ``s``.

    The expected fan-in of a sparse layer is ``n_in * (1 - s)``, so the dense
    bound is widened by ``1 / sqrt(1 - s)``.
    """
    if not 0.0 <= s < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {s}")
    return math.sqrt(6.0) / math.sqrt((n_in + n_out) * (1.0 - s))


def init_weights(t: Topology, spec: InitSpec = InitSpec()):
    """Draw trainable edge values; constant edges keep their fixed value.

    The bound of layer ``l`` uses its realized sparsity, counting constant
    edges as present.  With ``spec.constant_budget`` the layer's total weight
    variance ``edges * bound**2 / 3`` is kept, and the variance already carried
    by constant edges (``sum(c**2)``) is removed from the share of the trainable
    ones.  The share never drops below ``1/depth`` of the unconstrained
    variance, so parallel copies still separate while the cascade gain stays
    bounded.  Layers without constant edges are unaffected.
    """
    from .engine import CascadeWeights

    rng = np.random.default_rng(spec.seed)
    values = []
    for l, layer in enumerate(t.layers):
        v = layer.value.copy()
        trainable = layer.trainable
        count = int(trainable.sum())
        if count:
            n_in, n_out = t.layer_widths[l], t.layer_widths[l + 1]
            if spec.scheme == SPARSE_XAVIER:
                bound = sparse_xavier_bound(n_in, n_out, t.layer_sparsity(l))
            else:
                bound = xavier_bound(n_in, n_out)
            if spec.constant_budget and count < len(layer):
                var = bound * bound / 3.0
                share = (len(layer) * var - float(np.sum(layer.value ** 2))) / count
                bound = math.sqrt(3.0 * max(share, var / t.depth))
            v[trainable] = rng.uniform(-bound, bound, size=count)
        values.append(v)
    return CascadeWeights(values)
