"""Masked linear cascades: forward/backward passes and reconstruction training."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .init import InitSpec, init_weights
from .topology import Layer, Topology

__all__ = [
    "CascadeWeights",
    "TrainConfig",
    "ReconReport",
    "DivergedError",
    "layer_matrices",
    "effective_matrix",
    "forward",
    "forward_cache",
    "backward",
    "reconstruction_loss",
    "reconstruction_grad",
    "train_reconstruction",
    "append_diagonal_layer",
    "has_diagonal_layer",
    "count_l0_satisfied",
    "count_ratios",
]

DTYPES = {"f64": np.float64, "f32": np.float32}


class DivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass
class CascadeWeights:
    """Edge values aligned 1:1 with the edges of a topology, layer by layer."""

    values: list[np.ndarray]

    def copy(self) -> "CascadeWeights":
        return CascadeWeights([v.copy() for v in self.values])

    def check(self, t: Topology) -> None:
        if len(self.values) != t.depth:
            raise ValueError(f"weights have {len(self.values)} layers, topology has {t.depth}")
        for l, (v, layer) in enumerate(zip(self.values, t.layers)):
            if v.shape != (len(layer),):
                raise ValueError(f"layer {l}: {v.shape[0]} values for {len(layer)} edges")


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "l2"
    learning_rate: float | None = None  # None picks the per-loss default
    steps: int = 5000
    seed: int = 0
    epsilon_l0: float = 1e-4
    record_every: int = 100
    lr_schedule: str = "constant"
    precision: str = "f64"

    DEFAULT_LR = {"l2": 0.05, "l1": 0.005}

    def __post_init__(self):
        if self.loss not in ("l2", "l1"):
            raise ValueError(f"loss must be 'l2' or 'l1', got {self.loss!r}")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.epsilon_l0 > 0:
            raise ValueError(f"epsilon_l0 must be > 0, got {self.epsilon_l0}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"lr_schedule must be 'constant' or 'linear', got {self.lr_schedule!r}")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def lr(self) -> float:
        return self.DEFAULT_LR[self.loss] if self.learning_rate is None else self.learning_rate


@dataclass
class ReconReport:
    final_loss: float
    loss_trace: list[tuple[int, float]]
    l0_satisfied: int
    ratio_count: int
    trainable_params: int
    topology_name: str
    seed: int
    weights: CascadeWeights | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("weights")
        d["loss_trace"] = [list(p) for p in self.loss_trace]
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in self.loss_trace:
            writer.writerow([step, format(loss, ".9g")])
        return buf.getvalue()


def layer_matrices(w: CascadeWeights, t: Topology, dtype=np.float64) -> list[np.ndarray]:
    """Dense ``(n_{l+1}, n_l)`` matrix of every layer."""
    mats = []
    for l, (v, layer) in enumerate(zip(w.values, t.layers)):
        m = np.zeros((t.layer_widths[l + 1], t.layer_widths[l]), dtype=dtype)
        m[layer.dst, layer.src] = v
        mats.append(m)
    return mats


def effective_matrix(w: CascadeWeights, t: Topology) -> np.ndarray:
    """Product of all layer matrices, shaped ``(n_out, n_in)``."""
    out = np.eye(t.n_in)
    for m in layer_matrices(w, t):
        out = m @ out
    return out


def forward(w: CascadeWeights, t: Topology, x: np.ndarray) -> np.ndarray:
    """Propagate a batch ``x`` of shape ``(n_in, b)`` through the linear cascade."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != t.n_in:
        raise ValueError(f"input has {x.shape[0]} rows, topology has {t.n_in} inputs")
    for m in layer_matrices(w, t):
        x = m @ x
    return x


def forward_cache(mats: list[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    for m in mats:
        acts.append(m @ acts[-1])
    return acts


def backward(t: Topology, mats: list[np.ndarray], acts: list[np.ndarray],
             delta: np.ndarray) -> list[np.ndarray]:
    """Edge gradients given ``delta = dL/d(output)``; constant edges get zero."""
    grads = [None] * len(mats)
    for l in range(len(mats) - 1, -1, -1):
        layer = t.layers[l]
        g = delta @ acts[l].T
        ge = g[layer.dst, layer.src]
        ge[layer.constant] = 0.0
        grads[l] = ge
        if l:
            delta = mats[l].T @ delta
    return grads


def _loss_and_delta(residual: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    if loss == "l2":
        return float(np.sum(residual * residual)), 2.0 * residual
    # sign(0) = 0 is the chosen subgradient at satisfied entries
    return float(np.sum(np.abs(residual))), np.sign(residual)


def reconstruction_loss(w: CascadeWeights, t: Topology, target: np.ndarray,
                        loss: str = "l2") -> float:
    return _loss_and_delta(effective_matrix(w, t) - target, loss)[0]


def reconstruction_grad(w: CascadeWeights, t: Topology, target: np.ndarray,
                        loss: str = "l2", dtype=np.float64) -> tuple[float, list[np.ndarray]]:
    """Loss ``||target - W_d||`` (squared Frobenius or entrywise L1) and its edge gradients."""
    mats = layer_matrices(w, t, dtype)
    acts = forward_cache(mats, np.eye(t.n_in, dtype=dtype))
    value, delta = _loss_and_delta(acts[-1] - target.astype(dtype, copy=False), loss)
    return value, backward(t, mats, acts, delta)


def append_diagonal_layer(t: Topology) -> Topology:
    """Add a layer with one trainable edge ``i -> i`` per output neuron."""
    idx = np.arange(t.n_out)
    layer = Layer.build(idx, idx)
    return Topology(t.layer_widths + (t.n_out,), t.layers + (layer,), t.name + "+diag",
                    _checked=True)


def has_diagonal_layer(t: Topology) -> bool:
    """True when the last layer is a purely trainable ``i -> i`` diagonal behind another layer."""
    if t.depth < 2 or t.layer_widths[-1] != t.layer_widths[-2]:
        return False
    last = t.layers[-1]
    return (len(last) == t.n_out and bool(np.all(last.trainable))
            and np.array_equal(last.src, np.arange(t.n_out))
            and np.array_equal(last.dst, np.arange(t.n_out)))


def count_l0_satisfied(w: CascadeWeights, t: Topology, target: np.ndarray,
                       eps: float = 1e-4) -> int:
    """Number of target entries reproduced to within ``eps``."""
    return int(np.sum(np.abs(target - effective_matrix(w, t)) < eps))


def count_ratios(satisfied: int, n_out: int) -> int:
    """Ratios satisfied by a cascade ending in a diagonal layer.

    The diagonal layer can always fix the ``n_out`` output magnitudes, so only
    the remaining satisfied entries are ratios.  A count below ``n_out`` means
    training missed some magnitudes; it is clamped to 0 with a warning.
    """
    if satisfied < n_out:
        warnings.warn(f"only {satisfied} satisfied entries for {n_out} outputs; "
                      "ratio count clamped to 0", RuntimeWarning, stacklevel=2)
        return 0
    return satisfied - n_out


def train_reconstruction(t: Topology, target: np.ndarray, spec: InitSpec = InitSpec(),
                         cfg: TrainConfig = TrainConfig()) -> ReconReport:
    """Full-batch gradient descent of the cascade towards ``target``.

    The cascade is fed the identity batch, so its output is the effective
    matrix itself.  Only trainable edges move.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (t.n_out, t.n_in):
        raise ValueError(f"target shape {target.shape} != ({t.n_out}, {t.n_in})")
    dtype = DTYPES[cfg.precision]
    w = init_weights(t, spec)
    values = [v.astype(dtype) for v in w.values]
    masks = [layer.trainable for layer in t.layers]
    w = CascadeWeights(values)
    lr = cfg.lr
    trace = []
    loss = None
    for step in range(cfg.steps + 1):
        # overflow surfaces as a non-finite loss and is reported below
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = reconstruction_grad(w, t, target, cfg.loss, dtype)
        if not np.isfinite(loss):
            raise DivergedError(step, loss)
        if step % cfg.record_every == 0 or step == cfg.steps:
            trace.append((step, loss))
        if step == cfg.steps:
            break
        rate = lr if cfg.lr_schedule == "constant" else lr * (1.0 - step / cfg.steps)
        for v, g, m in zip(values, grads, masks):
            v[m] -= (rate * g[m]).astype(dtype, copy=False)
    w64 = CascadeWeights([v.astype(np.float64) for v in values])
    l0 = count_l0_satisfied(w64, t, target, cfg.epsilon_l0)
    ratio = count_ratios(l0, t.n_out) if has_diagonal_layer(t) else -1
    return ReconReport(final_loss=float(loss), loss_trace=trace, l0_satisfied=l0,
                       ratio_count=ratio, trainable_params=t.trainable_count,
                       topology_name=t.name, seed=cfg.seed, weights=w64)
