"""Layered sparse topologies: generators, skip connections and size metrics.

A :class:`Topology` is a cascade of ``L`` bipartite layers.  Layer ``l`` holds
edges from neurons of layer ``l`` (``src``) to neurons of layer ``l + 1``
(``dst``).  Every edge is either trainable or carries a fixed constant value.
Edges are stored per layer as coordinate arrays sorted by ``(dst, src)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Layer",
    "Topology",
    "ConnectivityReport",
    "gen_dense",
    "gen_random",
    "gen_clos",
    "gen_butterfly",
    "gen_hypercube",
    "gen_torus",
    "gen_low_rank",
    "gen_parallel_butterfly",
    "apply_skip_connections",
    "connectivity",
    "reachability",
    "conv_param_counts",
    "make_topology",
    "FAMILIES",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Layer:
    """Edges between two consecutive neuron layers."""

    src: np.ndarray
    dst: np.ndarray
    constant: np.ndarray  # bool, True for fixed-value edges
    value: np.ndarray  # fixed value of constant edges, 0 for trainable ones

    @classmethod
    def build(cls, src, dst, constant=None, value=None) -> "Layer":
        src = np.asarray(src, dtype=np.int64).reshape(-1)
        dst = np.asarray(dst, dtype=np.int64).reshape(-1)
        if src.shape != dst.shape:
            raise ValueError("src and dst must have the same length")
        if constant is None:
            constant = np.zeros(src.shape, dtype=bool)
        constant = np.asarray(constant, dtype=bool).reshape(-1)
        if value is None:
            value = np.zeros(src.shape, dtype=np.float64)
        value = np.where(constant, np.asarray(value, dtype=np.float64).reshape(-1), 0.0)
        order = np.lexsort((src, dst))
        return cls(_frozen(src[order]), _frozen(dst[order]),
                   _frozen(constant[order]), _frozen(value[order]))

    def __len__(self) -> int:
        return int(self.src.shape[0])

    @property
    def trainable(self) -> np.ndarray:
        return ~self.constant

    def __eq__(self, other) -> bool:
        if not isinstance(other, Layer):
            return NotImplemented
        return (np.array_equal(self.src, other.src)
                and np.array_equal(self.dst, other.dst)
                and np.array_equal(self.constant, other.constant)
                and np.array_equal(self.value, other.value))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Topology:
    """A layered DAG of trainable and constant edges."""

    layer_widths: tuple[int, ...]
    layers: tuple[Layer, ...]
    name: str = "topology"
    _checked: bool = field(default=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self._checked:
            return
        widths = self.layer_widths
        if len(widths) < 2:
            raise ValueError("a topology needs at least an input and an output layer")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {list(widths)}")
        if len(self.layers) != len(widths) - 1:
            raise ValueError(f"{len(widths)} widths need {len(widths) - 1} edge layers, "
                             f"got {len(self.layers)}")
        for l, layer in enumerate(self.layers):
            if len(layer):
                if layer.src.min() < 0 or layer.src.max() >= widths[l]:
                    raise ValueError(f"layer {l}: source index out of range [0, {widths[l]})")
                if layer.dst.min() < 0 or layer.dst.max() >= widths[l + 1]:
                    raise ValueError(f"layer {l}: destination index out of range [0, {widths[l + 1]})")
                key = layer.dst * widths[l] + layer.src
                if np.any(key[1:] == key[:-1]):
                    raise ValueError(f"layer {l}: duplicate edge")
            if not np.all(np.isfinite(layer.value)):
                raise ValueError(f"layer {l}: constant edge values must be finite")

    # construction helpers

    @classmethod
    def from_edges(cls, layer_widths: Sequence[int], layers: Iterable[Iterable[tuple]],
                   name: str = "topology") -> "Topology":
        """Build from per-layer edge tuples ``(src, dst)`` or ``(src, dst, value)``.

        A third element marks the edge as constant with that value.
        """
        built = []
        for edges in layers:
            edges = list(edges)
            src = [e[0] for e in edges]
            dst = [e[1] for e in edges]
            const = [len(e) > 2 and e[2] is not None for e in edges]
            value = [float(e[2]) if len(e) > 2 and e[2] is not None else 0.0 for e in edges]
            built.append(Layer.build(src, dst, const, value))
        return cls(tuple(layer_widths), tuple(built), name)

    def renamed(self, name: str) -> "Topology":
        return Topology(self.layer_widths, self.layers, name, _checked=True)

    # size metrics

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def edge_count(self) -> int:
        return sum(len(layer) for layer in self.layers)

    @property
    def trainable_count(self) -> int:
        return sum(int(layer.trainable.sum()) for layer in self.layers)

    @property
    def constant_count(self) -> int:
        return sum(int(layer.constant.sum()) for layer in self.layers)

    def layer_sparsity(self, l: int) -> float:
        """Realized sparsity ``1 - edges / (n_l * n_{l+1})`` of layer ``l``."""
        return 1.0 - len(self.layers[l]) / (self.layer_widths[l] * self.layer_widths[l + 1])

    def masks(self) -> list[np.ndarray]:
        """Boolean adjacency per layer, shaped ``(n_{l+1}, n_l)``."""
        out = []
        for l, layer in enumerate(self.layers):
            m = np.zeros((self.layer_widths[l + 1], self.layer_widths[l]), dtype=bool)
            m[layer.dst, layer.src] = True
            out.append(m)
        return out

    def in_degrees(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        """(fan-in, trainable fan-in) of every neuron in layer ``l + 1``."""
        layer = self.layers[l]
        n = self.layer_widths[l + 1]
        k = np.bincount(layer.dst, minlength=n)
        t = np.bincount(layer.dst[layer.trainable], minlength=n)
        return k, t

    def __eq__(self, other) -> bool:
        if not isinstance(other, Topology):
            return NotImplemented
        return (self.name == other.name and self.layer_widths == other.layer_widths
                and self.layers == other.layers)

    __hash__ = None

    # serialization

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            edges = []
            for s, d, c, v in zip(layer.src.tolist(), layer.dst.tolist(),
                                  layer.constant.tolist(), layer.value.tolist()):
                edges.append([s, d, "c", v] if c else [s, d, "t"])
            layers.append(edges)
        return {"name": self.name, "layer_widths": list(self.layer_widths), "layers": layers}

    @classmethod
    def from_dict(cls, data: dict) -> "Topology":
        layers = []
        for edges in data["layers"]:
            for e in edges:
                if e[2] not in ("t", "c") or (e[2] == "c" and len(e) != 4):
                    raise ValueError(f"malformed edge {e!r}")
            layers.append([(e[0], e[1], e[3]) if e[2] == "c" else (e[0], e[1]) for e in edges])
        return cls.from_edges(data["layer_widths"], layers, data.get("name", "topology"))

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "Topology":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ConnectivityReport:
    reachable_pairs: int
    total_pairs: int
    fraction: float


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


def _log2(n: int, what: str = "n") -> int:
    _require(isinstance(n, (int, np.integer)) and n >= 2 and (n & (n - 1)) == 0,
             f"{what} must be a power of two >= 2, got {n}")
    return int(n).bit_length() - 1


def _from_masks(masks: Sequence[np.ndarray], name: str) -> Topology:
    widths = [masks[0].shape[1]] + [m.shape[0] for m in masks]
    layers = []
    for m in masks:
        dst, src = np.nonzero(m)
        layers.append(Layer.build(src, dst))
    return Topology(tuple(widths), tuple(layers), name)


# generators

def gen_dense(n_in: int, n_out: int) -> Topology:
    """Single complete bipartite layer."""
    _require(n_in > 0 and n_out > 0, "layer widths must be positive")
    return _from_masks([np.ones((n_out, n_in), dtype=bool)], f"dense({n_in},{n_out})")


def gen_random(n_in: int, n_out: int, depth: int, density: float, seed: int,
               hidden: int | None = None) -> Topology:
    """Bernoulli random cascade; every potential edge kept with probability ``density``."""
    _require(depth >= 1, f"depth must be >= 1, got {depth}")
    _require(0.0 < density <= 1.0, f"density must be in (0, 1], got {density}")
    hidden = max(n_in, n_out) if hidden is None else hidden
    widths = [n_in] + [hidden] * (depth - 1) + [n_out]
    _require(all(w > 0 for w in widths), f"zero-width layer in {widths}")
    rng = np.random.default_rng(seed)
    masks = [rng.random((widths[l + 1], widths[l])) < density for l in range(depth)]
    return _from_masks(masks, f"random({n_in},{n_out},{depth},{density:g})")


def gen_clos(n_in: int, n_out: int, r: int, n_mid: int) -> Topology:
    """Three-stage Clos network with ``r`` ingress/egress switches and ``n_mid`` middle switches.

    Hidden neuron ``g * n_mid + m`` is the port of edge switch ``g`` facing middle switch ``m``.
    """
    _require(r >= 1 and n_mid >= 1, "r and n_mid must be >= 1")
    _require(n_in % r == 0 and n_out % r == 0,
             f"r={r} must divide n_in={n_in} and n_out={n_out}")
    a, b = n_in // r, n_out // r
    w = r * n_mid
    ingress = np.zeros((w, n_in), dtype=bool)
    middle = np.zeros((w, w), dtype=bool)
    egress = np.zeros((n_out, w), dtype=bool)
    for g in range(r):
        for m in range(n_mid):
            ingress[g * n_mid + m, g * a:(g + 1) * a] = True
            egress[g * b:(g + 1) * b, g * n_mid + m] = True
            for h in range(r):
                middle[h * n_mid + m, g * n_mid + m] = True
    return _from_masks([ingress, middle, egress], f"clos({n_in},{n_out},{r},{n_mid})")


def _butterfly_layers(n: int, depth: int, offset: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    bits = _log2(n)
    idx = np.arange(n)
    out = []
    for t in range(depth):
        partner = idx ^ (1 << (t % bits))
        out.append((np.concatenate([idx, partner]), np.concatenate([idx, idx])))
    return out


def gen_butterfly(n: int, depth: int) -> Topology:
    """Radix-2 butterfly: layer ``t`` links ``i`` to ``i`` and ``i ^ 2**(t mod log2 n)``."""
    _log2(n)
    _require(depth >= 1, f"depth must be >= 1, got {depth}")
    layers = tuple(Layer.build(s, d) for s, d in _butterfly_layers(n, depth))
    return Topology((n,) * (depth + 1), layers, f"butterfly({n},{depth})")


def gen_hypercube(n: int, depth: int) -> Topology:
    """Each layer links every node to itself and its ``log2 n`` hypercube neighbours."""
    bits = _log2(n)
    _require(depth >= 1, f"depth must be >= 1, got {depth}")
    idx = np.arange(n)
    src = np.concatenate([idx] + [idx ^ (1 << b) for b in range(bits)])
    dst = np.tile(idx, bits + 1)
    layer = Layer.build(src, dst)
    return Topology((n,) * (depth + 1), (layer,) * depth, f"hypercube({n},{depth})")


def gen_torus(rows: int, cols: int, depth: int) -> Topology:
    """2-D torus with self edges; coinciding wrap-around neighbours are merged."""
    _require(rows >= 2 and cols >= 2, f"torus needs rows, cols >= 2, got {rows}x{cols}")
    _require(depth >= 1, f"depth must be >= 1, got {depth}")
    n = rows * cols
    src, dst = [], []
    for r in range(rows):
        for c in range(cols):
            nbrs = {(r, c), ((r - 1) % rows, c), ((r + 1) % rows, c),
                    (r, (c - 1) % cols), (r, (c + 1) % cols)}
            for rr, cc in nbrs:
                src.append(rr * cols + cc)
                dst.append(r * cols + c)
    layer = Layer.build(src, dst)
    return Topology((n,) * (depth + 1), (layer,) * depth, f"torus({rows},{cols},{depth})")


def gen_low_rank(n_in: int, n_out: int, k: int) -> Topology:
    """Two dense layers through a ``k``-neuron bottleneck."""
    _require(k >= 1, f"k must be >= 1, got {k}")
    masks = [np.ones((k, n_in), dtype=bool), np.ones((n_out, k), dtype=bool)]
    return _from_masks(masks, f"low_rank({n_in},{n_out},{k})")


def gen_parallel_butterfly(n: int, d: int, p: int) -> Topology:
    """``p`` depth-``d`` butterflies on shared inputs, summed into ``n`` outputs.

    Block ``b`` owns hidden neurons ``b * n .. b * n + n - 1``.  The final layer is
    made of constant edges valued 1.
    """
    _log2(n)
    _require(d >= 1 and p >= 1, f"d and p must be >= 1, got d={d}, p={p}")
    layers = []
    for t, (s, dd) in enumerate(_butterfly_layers(n, d)):
        offs = np.repeat(np.arange(p) * n, s.size)
        src = np.tile(s, p) + (0 if t == 0 else offs)
        dst = np.tile(dd, p) + offs
        layers.append(Layer.build(src, dst))
    src = np.arange(p * n)
    dst = np.tile(np.arange(n), p)
    layers.append(Layer.build(src, dst, np.ones(p * n, dtype=bool), np.ones(p * n)))
    widths = (n,) + (p * n,) * d + (n,)
    return Topology(widths, tuple(layers), f"parallel_butterfly({n},{d},{p})")


def apply_skip_connections(t: Topology, seed: int | None = None,
                           strategy: str = "first") -> Topology:
    """Fix one in-edge of every non-input neuron to the constant 1.

    Neurons that already have a constant in-edge are left as they are, which
    makes the operation idempotent.  ``strategy="first"`` picks the neuron's own
    straight-through edge ``j mod n_l -> j`` when the layer width is a multiple of
    the previous one and that edge exists, and the in-edge with the smallest
    source index otherwise.  ``strategy="random"``
    picks one uniformly using ``seed``.
    """
    if strategy not in ("first", "random"):
        raise ValueError(f"unknown skip strategy {strategy!r}")
    rng = np.random.default_rng(seed) if strategy == "random" else None
    layers = []
    for l, layer in enumerate(t.layers):
        n = t.layer_widths[l + 1]
        k = np.bincount(layer.dst, minlength=n)
        empty = np.flatnonzero(k == 0)
        if empty.size:
            raise ValueError(f"neuron {int(empty[0])} of layer {l + 1} has no in-edges; "
                             f"cannot add a skip connection")
        has_const = np.bincount(layer.dst[layer.constant], minlength=n) > 0
        constant = layer.constant.copy()
        value = layer.value.copy()
        starts = np.concatenate([[0], np.cumsum(k)[:-1]])
        n_src = t.layer_widths[l]
        replicated = n % n_src == 0
        for j in np.flatnonzero(~has_const):
            block = slice(starts[j], starts[j] + k[j])
            if rng is not None:
                pick = starts[j] + int(rng.integers(k[j]))
            else:
                own = np.flatnonzero(layer.src[block] == j % n_src) if replicated else ()
                # edges are sorted by (dst, src), so the block starts at the smallest source
                pick = starts[j] + (int(own[0]) if len(own) else 0)
            constant[pick] = True
            value[pick] = 1.0
        layers.append(Layer.build(layer.src, layer.dst, constant, value))
    name = t.name if t.name.endswith("+skip") else t.name + "+skip"
    return Topology(t.layer_widths, tuple(layers), name, _checked=True)


# analysis

def reachability(t: Topology) -> list[np.ndarray]:
    """Forward reachability per layer: ``reach[l][i, m]`` iff input ``i`` reaches neuron ``m`` of layer ``l``."""
    reach = [np.eye(t.n_in, dtype=bool)]
    for mask in t.masks():
        reach.append((reach[-1].astype(np.float64) @ mask.T) > 0)
    return reach


def connectivity(t: Topology) -> ConnectivityReport:
    reached = int(reachability(t)[-1].sum())
    total = t.n_in * t.n_out
    return ConnectivityReport(reached, total, reached / total)


def conv_param_counts(f: int, c: int, k: int, n: int, t: int, s: float) -> tuple[int, float]:
    """Parameter counts of a dense conv layer and its depthwise + sparse pointwise cascade.

    ``s`` is the fraction of pointwise weights kept, as in ``f*f*c*n + c*n*k*t*s``.
    """
    return f * f * c * k, f * f * c * n + c * n * k * t * s


# family dispatch used by experiments and the CLI

FAMILIES = {
    "dense": (gen_dense, ("n_in", "n_out")),
    "random": (gen_random, ("n_in", "n_out", "depth", "density", "seed")),
    "clos": (gen_clos, ("n_in", "n_out", "r", "n_mid")),
    "butterfly": (gen_butterfly, ("n", "depth")),
    "hypercube": (gen_hypercube, ("n", "depth")),
    "torus": (gen_torus, ("rows", "cols", "depth")),
    "low_rank": (gen_low_rank, ("n_in", "n_out", "k")),
    "parallel_butterfly": (gen_parallel_butterfly, ("n", "d", "p")),
}


def make_topology(family: str, skip: bool = False, **params) -> Topology:
    """Build a topology of ``family`` from keyword parameters.

    Missing ``n_in``/``n_out``/``n`` are filled from each other, so ``n=32`` is
    enough for every square family.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown topology family {family!r}; choose from {sorted(FAMILIES)}")
    fn, names = FAMILIES[family]
    p = dict(params)
    if "n" in p:
        p.setdefault("n_in", p["n"])
        p.setdefault("n_out", p["n"])
    if "d" not in p and "depth" in p:
        p["d"] = p["depth"]
    if "depth" not in p and family in ("random", "butterfly", "hypercube", "torus"):
        p["depth"] = 1
    p.setdefault("seed", 0)
    missing = [k for k in names if k not in p]
    if missing:
        raise ValueError(f"{family} needs parameters {missing}")
    topo = fn(*[p[k] for k in names])
    return apply_skip_connections(topo) if skip else topo
