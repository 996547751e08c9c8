"""Desk-scale comparative studies: reconstruction sweeps, controllability
studies and a depth x sparsity trainability grid.

Every table row depends only on its spec and seed, so reruns produce
byte-identical CSV.  Independent cells may run in worker processes; results
are always merged back in spec order.
"""

from __future__ import annotations

import csv
import io
import itertools
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .control import KMatrix, k_matrix, train_control
from .engine import TrainConfig, append_diagonal_layer, layer_matrices, train_reconstruction
from .init import SPARSE_XAVIER, InitSpec, init_weights
from .matching import build_constraint_graph, max_matching
from .topology import FAMILIES, Topology, connectivity, gen_random, make_topology

__all__ = [
    "SWEEP_TRAIN",
    "SweepSpec",
    "SweepRow",
    "run_recon_sweep",
    "sweep_csv",
    "param_grid",
    "budget_topologies",
    "gaussian_target",
    "ControlRun",
    "run_control_study",
    "control_summary_csv",
    "SyntheticTeacher",
    "IdxDataset",
    "GridSpec",
    "GridRow",
    "run_grid",
    "train_classifier",
    "grid_csv",
    "IdxParseError",
    "parse_idx",
]

# Protocol for the n=32 sweeps.  The engine default (lr 0.05, constant) is
# tuned for shallow cascades and diverges on the deep ones.
SWEEP_TRAIN = TrainConfig(loss="l2", learning_rate=0.003, steps=10000, lr_schedule="linear")


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def _map(fn, items: list, jobs: int) -> list:
    """``map`` over independent cells, results in input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# reconstruction sweeps

def param_grid(**ranges) -> list[dict]:
    """Cartesian product of parameter ranges, in key order then value order."""
    keys = list(ranges)
    values = [v if isinstance(v, (list, tuple, range)) else [v] for v in ranges.values()]
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def gaussian_target(n_out: int, n_in: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n_out, n_in))


@dataclass(frozen=True)
class SweepSpec:
    """A family, one parameter dict per topology instance, and the seeds to run each on.

    ``params`` hold generator arguments other than ``n_in``/``n_out`` (for
    square families, ``n``), e.g. ``({"depth": 4}, {"depth": 8})``.
    """

    family: str
    params: tuple = ({},)
    n_in: int = 32
    n_out: int = 32
    skip: bool = False
    seeds: tuple = (0,)
    train: TrainConfig = SWEEP_TRAIN
    with_matching: bool = True
    diag: bool = False  # append a diagonal layer to every instance

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown topology family {self.family!r}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        object.__setattr__(self, "params", tuple(dict(p) for p in self.params))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def topologies(self) -> list[Topology]:
        out = []
        for p in self.params:
            p = dict(p)
            if self.family in ("butterfly", "hypercube", "parallel_butterfly"):
                if self.n_in != self.n_out:
                    raise ValueError(f"{self.family} needs n_in == n_out")
                p.setdefault("n", self.n_in)
            else:
                p.setdefault("n_in", self.n_in)
                p.setdefault("n_out", self.n_out)
            t = make_topology(self.family, skip=self.skip, **p)
            if (t.n_in, t.n_out) != (self.n_in, self.n_out):
                raise ValueError(f"{t.name} is {t.n_in}->{t.n_out}, sweep is "
                                 f"{self.n_in}->{self.n_out}")
            out.append(append_diagonal_layer(t) if self.diag else t)
        return out


@dataclass(frozen=True)
class SweepRow:
    topology: str
    params: str
    depth: int
    skip: bool
    seed: int
    final_loss: float
    l0: int
    matching: int  # -1 when not computed
    trainable: int = field(default=0, compare=False)

    def cells(self) -> list[str]:
        return [self.topology, self.params, str(self.depth), str(int(self.skip)),
                str(self.seed), _fmt(self.final_loss), str(self.l0), str(self.matching)]


SWEEP_HEADER = ["topology", "params", "depth", "skip", "seed", "final_loss", "l0", "matching"]


def _param_str(p: dict) -> str:
    return ";".join(f"{k}={p[k]}" for k in sorted(p))


def _recon_cell(job) -> tuple[float, int]:
    t, seed, cfg = job
    target = gaussian_target(t.n_out, t.n_in, seed)
    cfg = replace(cfg, seed=seed)
    rep = train_reconstruction(t, target, InitSpec(seed=seed), cfg)
    return rep.final_loss, rep.l0_satisfied


def run_recon_sweep(spec: SweepSpec, jobs: int = 1) -> list[SweepRow]:
    """One reconstruction run per (topology instance, seed).

    Each seed draws a fresh standard Gaussian target and seeds the weight
    draw.  Rows follow ``spec.params`` order, then ``spec.seeds`` order.
    """
    topos = spec.topologies()
    bounds = [max_matching(build_constraint_graph(t)) if spec.with_matching else -1
              for t in topos]
    index = [(i, s) for i in range(len(topos)) for s in spec.seeds]
    results = _map(_recon_cell, [(topos[i], s, spec.train) for i, s in index], jobs)
    rows = []
    for (i, seed), (loss, l0) in zip(index, results):
        t = topos[i]
        rows.append(SweepRow(spec.family, _param_str(spec.params[i]), t.depth, spec.skip, seed,
                             loss, l0, bounds[i], t.trainable_count))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def budget_topologies(budget: int, n: int = 32, skip: bool = True,
                      pb_depth: int = 6) -> dict[str, dict]:
    """Largest instance of each family whose trainable edge count fits ``budget``.

    Returns ``{family: params}`` for families where some instance fits.  The
    parallel butterfly uses blocks of ``pb_depth`` layers and varies the
    number of blocks.
    """
    def fits(family, **p):
        return make_topology(family, skip=skip, n=n, **p).trainable_count <= budget

    def largest(family, key, start, **fixed):
        best = None
        v = start
        while fits(family, **{key: v}, **fixed):
            best = v
            v += 1
        return None if best is None else {key: best, **fixed}

    out = {
        "butterfly": largest("butterfly", "depth", 1),
        "hypercube": largest("hypercube", "depth", 1),
        "torus": largest("torus", "depth", 1, rows=_torus_shape(n)[0], cols=_torus_shape(n)[1]),
        "clos": largest("clos", "n_mid", 1, r=_clos_r(n)),
        "low_rank": largest("low_rank", "k", 1),
        "parallel_butterfly": largest("parallel_butterfly", "p", 1, d=pb_depth),
    }
    return {k: v for k, v in out.items() if v is not None}


def _torus_shape(n: int) -> tuple[int, int]:
    rows = int(np.sqrt(n))
    while n % rows:
        rows -= 1
    return max(rows, n // rows), min(rows, n // rows)


def _clos_r(n: int) -> int:
    r = int(round(np.sqrt(2 * n)))
    while n % r:
        r -= 1
    return r


# controllability

@dataclass
class ControlRun:
    name: str
    seed: int
    edges: int
    trainable: int
    k: KMatrix
    final_loss: float

    def summary_cells(self) -> list[str]:
        return [self.name, str(self.seed), str(self.edges), str(self.trainable),
                _fmt(self.k.K.sum()), _fmt(self.k.mean), _fmt(self.k.variance),
                _fmt(self.final_loss)]


CONTROL_HEADER = ["name", "seed", "edges", "trainable", "sum_k", "mean", "variance", "final_loss"]


def _control_cell(job) -> tuple[KMatrix, float]:
    t, seed, iters, lr = job
    state = train_control(t, iters=iters, lr=lr, seed=seed)
    return k_matrix(state.C[-1]), state.loss_trace[-1][1]


def run_control_study(topologies: Sequence[Topology], seeds: Sequence[int] = (0,),
                      iters: int = 1000, lr: float = 0.1, jobs: int = 1) -> list[ControlRun]:
    """Train a control state per (topology, seed) and collect its K-matrix."""
    cells = [(t, int(s), iters, lr) for t in topologies for s in seeds]
    results = _map(_control_cell, cells, jobs)
    return [ControlRun(t.name, s, t.edge_count, t.trainable_count, k, loss)
            for (t, s, _, _), (k, loss) in zip(cells, results)]


def control_summary_csv(runs: Sequence[ControlRun]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONTROL_HEADER)
    for r in runs:
        w.writerow(r.summary_cells())
    return buf.getvalue()


# classification grid

@dataclass(frozen=True)
class SyntheticTeacher:
    """Labels from a fixed random dense one-hidden-layer network.

    The hidden layer is linear, so the classes are linearly separable and a
    shallow linear student can solve the task.
    """

    seed: int = 0
    n_features: int = 64
    n_hidden: int = 64
    n_classes: int = 10

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        w1 = rng.standard_normal((self.n_hidden, self.n_features)) / np.sqrt(self.n_features)
        w2 = rng.standard_normal((self.n_classes, self.n_hidden)) / np.sqrt(self.n_hidden)
        return w1, w2

    def label(self, x: np.ndarray) -> np.ndarray:
        w1, w2 = self.weights()
        return np.argmax(x @ w1.T @ w2.T, axis=1)

    def sample(self, n: int, stream: int = 0) -> tuple[np.ndarray, np.ndarray]:
        x = np.random.default_rng([self.seed, 1, stream]).standard_normal((n, self.n_features))
        return x, self.label(x)

    def split(self, n_train: int, n_test: int):
        x_tr, y_tr = self.sample(n_train, 0)
        x_te, y_te = self.sample(n_test, 1)
        return x_tr, y_tr, x_te, y_te


@dataclass(frozen=True)
class IdxDataset:
    """Image/label IDX files; without test files the last sixth is held out."""

    train_images: str
    train_labels: str
    test_images: str | None = None
    test_labels: str | None = None
    limit: int | None = None

    def split(self, n_train: int | None = None, n_test: int | None = None):
        x, y = parse_idx(self.train_images), parse_idx(self.train_labels)
        if len(x) != len(y):
            raise ValueError(f"{len(x)} images but {len(y)} labels")
        if self.test_images and self.test_labels:
            x_te, y_te = parse_idx(self.test_images), parse_idx(self.test_labels)
            if len(x_te) != len(y_te):
                raise ValueError(f"{len(x_te)} test images but {len(y_te)} test labels")
            x_tr, y_tr = x, y
        else:
            cut = len(x) - len(x) // 6
            x_tr, y_tr, x_te, y_te = x[:cut], y[:cut], x[cut:], y[cut:]
        if n_train is not None:
            x_tr, y_tr = x_tr[:n_train], y_tr[:n_train]
        if n_test is not None:
            x_te, y_te = x_te[:n_test], y_te[:n_test]
        return x_tr, y_tr, x_te, y_te

    @property
    def n_classes(self) -> int:
        return 10


@dataclass(frozen=True)
class GridSpec:
    hidden_width: int = 256
    depths: tuple = tuple(range(1, 21))
    sparsities: tuple = (0.0, 0.5, 0.75, 0.875, 0.9375, 0.96875, 0.984375, 0.9921875,
                         0.99609375)
    task: object = SyntheticTeacher()
    epochs: int = 10
    seeds: tuple = (0,)
    scheme: str = SPARSE_XAVIER
    learning_rate: float = 0.05
    batch_size: int = 50
    n_train: int = 5000
    n_test: int = 1000

    def __post_init__(self):
        for s in self.sparsities:
            if not 0.0 <= s < 1.0:
                raise ValueError(f"sparsity must be in [0, 1), got {s}")
        for d in self.depths:
            if d < 1:
                raise ValueError(f"depth must be >= 1, got {d}")
        if self.hidden_width < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("hidden_width and batch_size must be >= 1, epochs >= 0")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "sparsities", tuple(float(s) for s in self.sparsities))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclass(frozen=True)
class GridRow:
    depth: int
    sparsity: float
    seed: int
    accuracy: float
    connectivity: float

    def cells(self) -> list[str]:
        return [str(self.depth), _fmt(self.sparsity), str(self.seed), _fmt(self.accuracy),
                _fmt(self.connectivity)]


GRID_HEADER = ["depth", "sparsity", "seed", "accuracy", "connectivity"]


def train_classifier(t: Topology, x_tr, y_tr, x_te, y_te, init: InitSpec, epochs: int,
                     lr: float, batch_size: int, seed: int) -> float:
    """Minibatch SGD of a linear cascade with a softmax cross-entropy readout.

    Returns test accuracy; a run whose weights overflow scores 0.
    """
    mats = layer_matrices(init_weights(t, init), t)
    masks = t.masks()
    rng = np.random.default_rng([seed, 2])
    n = len(x_tr)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            perm = rng.permutation(n)
            for b in range(0, n, batch_size):
                idx = perm[b:b + batch_size]
                acts = [x_tr[idx].T]
                for m in mats:
                    acts.append(m @ acts[-1])
                z = acts[-1] - acts[-1].max(axis=0)
                p = np.exp(z)
                p /= p.sum(axis=0)
                p[y_tr[idx], np.arange(len(idx))] -= 1.0
                delta = p / len(idx)
                for l in range(len(mats) - 1, -1, -1):
                    g = (delta @ acts[l].T) * masks[l]
                    if l:
                        delta = mats[l].T @ delta
                    mats[l] -= lr * g
            if not all(np.isfinite(m).all() for m in mats):
                return 0.0
        out = x_te.T
        for m in mats:
            out = m @ out
    return float(np.mean(np.argmax(out, axis=0) == y_te))


def _grid_cell(job) -> tuple[float, float]:
    spec, depth, s, seed, data = job
    x_tr, y_tr, x_te, y_te = data
    n_classes = spec.task.n_classes
    # depth counts hidden layers
    t = gen_random(x_tr.shape[1], n_classes, depth + 1, 1.0 - s, seed, hidden=spec.hidden_width)
    acc = train_classifier(t, x_tr, y_tr, x_te, y_te, InitSpec(spec.scheme, seed), spec.epochs,
                           spec.learning_rate, spec.batch_size, seed)
    return acc, connectivity(t).fraction


def run_grid(spec: GridSpec, jobs: int = 1) -> list[GridRow]:
    """Accuracy and connectivity per (depth, sparsity, seed), in that nesting order."""
    data = spec.task.split(spec.n_train, spec.n_test)
    cells = [(spec, d, s, seed, data) for d in spec.depths for s in spec.sparsities
             for seed in spec.seeds]
    results = _map(_grid_cell, cells, jobs)
    return [GridRow(d, s, seed, acc, conn)
            for (_, d, s, seed, _), (acc, conn) in zip(cells, results)]


def grid_csv(rows: Sequence[GridRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


# IDX ingestion

class IdxParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


_IMAGES, _LABELS = 0x00000803, 0x00000801


def parse_idx(path) -> np.ndarray:
    """Read an IDX images or labels file.

    Images come back as ``(count, rows * cols)`` floats scaled to [0, 1];
    labels as ``(count,)`` ints, which must lie in 0..9.
    """
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxParseError("truncated magic number", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic == _IMAGES:
        ndim = 3
    elif magic == _LABELS:
        ndim = 1
    else:
        raise IdxParseError(f"bad magic 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxParseError("truncated header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) < header + size:
        raise IdxParseError(f"truncated data: expected {size} bytes", len(data))
    raw = np.frombuffer(data, dtype=np.uint8, count=size, offset=header)
    if magic == _IMAGES:
        return raw.reshape(dims[0], dims[1] * dims[2]).astype(np.float64) / 255.0
    bad = np.flatnonzero(raw > 9)
    if bad.size:
        i = int(bad[0])
        raise IdxParseError(f"label {raw[i]} at index {i} is outside 0..9", header + i)
    return raw.astype(np.int64)
