"""Data-free controllability heuristic.

``C[l][i, j, k]`` is how much control the optimizer has over the ratio of
cascade inputs ``i`` and ``j`` at neuron ``k`` of layer ``l``.  Control enters
at neurons with trainable in-edges (``dC``) and is split across each neuron's
out-edges by ratio tensors ``R``.  Both are driven by free parameters that are
trained to make every output control ``n_in - 1`` ratios.

Internally tensors are kept neuron-major as ``(n_l, n_in * n_in)`` with pair
index ``p = i * n_in + j``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit

from .engine import DivergedError
from .topology import Topology, reachability

__all__ = [
    "ControlState",
    "KMatrix",
    "ControlModel",
    "diamond",
    "propagate",
    "control_loss",
    "train_control",
    "k_matrix",
]


def diamond(C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``out[i, j, k] = sum_m C[i, j, m] * R[i, j, k, m]`` for dense ``(q,q,r)`` and ``(q,q,s,r)``."""
    return np.einsum("ijm,ijkm->ijk", C, R)


def control_loss(C_L: np.ndarray, n_in: int) -> float:
    """Squared shortfall of every output from controlling ``n_in - 1`` ratios."""
    totals = C_L.sum(axis=(0, 1))
    return float(np.sum(((n_in - 1) - totals) ** 2))


def _soft_and_slope(theta: np.ndarray, mask: np.ndarray):
    """Masked softplus of ``theta`` and its derivative, the masked sigmoid."""
    w = np.abs(theta)
    np.negative(w, out=w)
    np.exp(w, out=w)
    w += 1.0  # 1 + exp(-|x|), in (1, 2]
    soft = np.log(w)
    soft += np.maximum(theta, 0.0)
    soft *= mask
    sig = np.minimum(theta, 0.0)
    np.exp(sig, out=sig)
    sig /= w
    sig *= mask
    return soft, sig


# The kernels below walk edges in source-sorted order; ``starts`` bounds each
# source's group.  Inner loops run over the contiguous pair axis.

@njit(cache=True)
def _shift_by_group_max(Rp, order, starts, out):
    P = out.shape[1]
    m = np.empty(P)
    for g in range(starts.shape[0] - 1):
        a, b = starts[g], starts[g + 1]
        m[:] = -np.inf
        for e in range(a, b):
            row = Rp[order[e]]
            for p in range(P):
                if row[p] > m[p]:
                    m[p] = row[p]
        for e in range(a, b):
            row = Rp[order[e]]
            for p in range(P):
                out[e, p] = row[p] - m[p]


@njit(cache=True)
def _layer_forward(R, starts, src, dst, C_prev, soft, cap, pair_t, raw, S, scale, C_out):
    """Normalize ``R`` (holding exponentials) per source, then diamond product,
    capped added control, clamp and pair rescale."""
    E, P = R.shape
    n_dst = raw.shape[0]
    tot = np.empty(P)
    for g in range(starts.shape[0] - 1):
        a, b = starts[g], starts[g + 1]
        tot[:] = 0.0
        for e in range(a, b):
            for p in range(P):
                tot[p] += R[e, p]
        for e in range(a, b):
            for p in range(P):
                R[e, p] /= tot[p]
    raw[:, :] = 0.0
    for e in range(E):
        s, d = src[e], dst[e]
        for p in range(P):
            raw[d, p] += R[e, p] * C_prev[s, p]
    for d in range(n_dst):
        t = 0.0
        for p in range(P):
            t += soft[d, p]
        S[d] = t
        sc = cap[d] / t if t > cap[d] else 1.0
        scale[d] = sc
        for p in range(P):
            raw[d, p] += sc * soft[d, p]
    for d in range(n_dst):
        for p in range(P):
            c = min(max(raw[d, p], 0.0), 1.0)
            ct = min(max(raw[d, pair_t[p]], 0.0), 1.0)
            C_out[d, p] = c / max(1.0, c + ct)


@njit(cache=True)
def _layer_backward(g, Rp_grad, theta_grad, order, starts, src, dst, C_prev, cap, pair_t,
                    R, raw, soft, sig, S, scale, g_prev):
    """Reverse of ``_layer_forward`` given ``g = dL/dC_out``."""
    E, P = R.shape
    n_dst = raw.shape[0]
    # pairwise rescale C = c / max(1, c + c^T), then the clamp
    gc = np.empty_like(g)
    for d in range(n_dst):
        for p in range(P):
            pt = pair_t[p]
            c = min(max(raw[d, p], 0.0), 1.0)
            ct = min(max(raw[d, pt], 0.0), 1.0)
            D = c + ct
            if D > 1.0:
                # own term plus the transpose pair's dependence on this entry
                val = g[d, p] / D - (g[d, p] * c + g[d, pt] * ct) / (D * D)
            else:
                val = g[d, p]
            r = raw[d, p]
            gc[d, p] = val if 0.0 < r < 1.0 else 0.0
    # added control soft * min(1, cap / S)
    for d in range(n_dst):
        corr = 0.0
        if scale[d] < 1.0:
            dot = 0.0
            for p in range(P):
                dot += gc[d, p] * soft[d, p]
            corr = cap[d] / (S[d] * S[d]) * dot
        for p in range(P):
            theta_grad[d, p] = (gc[d, p] * scale[d] - corr) * sig[d, p]
    # diamond product and the per-source softmax
    g_prev[:, :] = 0.0
    dot = np.empty(P)
    for grp in range(starts.shape[0] - 1):
        a, b = starts[grp], starts[grp + 1]
        s = src[a]
        dot[:] = 0.0
        for e in range(a, b):
            d = dst[e]
            for p in range(P):
                gr = gc[d, p] * R[e, p]
                g_prev[s, p] += gr
                dot[p] += gr * C_prev[s, p]
        for e in range(a, b):
            d = dst[e]
            row = order[e]
            for p in range(P):
                Rp_grad[row, p] = R[e, p] * (gc[d, p] * C_prev[s, p] - dot[p])


class _LayerPlan:
    """Index structures for one layer, edges re-ordered by source."""

    def __init__(self, t: Topology, l: int, reach_next: np.ndarray, pair_ok: np.ndarray):
        layer = t.layers[l]
        n_dst = t.layer_widths[l + 1]
        self.n_dst = n_dst
        self.order = np.lexsort((layer.dst, layer.src))
        self.src = layer.src[self.order]
        self.dst = layer.dst[self.order]
        e = len(self.src)
        self.starts = np.r_[np.flatnonzero(np.r_[True, self.src[1:] != self.src[:-1]]), e] if e \
            else np.zeros(1, np.int64)
        k, tr = t.in_degrees(l)
        self.cap = np.minimum(tr, np.maximum(k - 1, 0)).astype(np.float64)
        # added control only for pairs whose inputs both reach the neuron
        n0 = t.n_in
        both = (reach_next.T[:, :, None] & reach_next.T[:, None, :]).reshape(n_dst, n0 * n0)
        self.mask = (both & pair_ok[None, :] & (self.cap > 0)[:, None]).astype(np.float64)


@dataclass
class _Cache:
    R: np.ndarray
    raw: np.ndarray
    soft: np.ndarray
    sig: np.ndarray  # d soft / d theta, zero off the mask
    S: np.ndarray
    scale: np.ndarray


class ControlModel:
    """Propagation and exact gradients of the controllability loss for one topology."""

    def __init__(self, t: Topology):
        self.topology = t
        self.n0 = t.n_in
        P = self.n0 * self.n0
        i, j = np.divmod(np.arange(P), self.n0)
        self.pair_t = j * self.n0 + i
        self.pair_ok = i != j
        reach = reachability(t)
        self.plans = [_LayerPlan(t, l, reach[l + 1], self.pair_ok) for l in range(t.depth)]

    @property
    def n_pairs(self) -> int:
        return self.n0 * self.n0

    def init_params(self, seed: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
        rng = np.random.default_rng(seed)
        t = self.topology
        R_params = [rng.normal(0.0, 0.1, (len(layer), self.n_pairs)) for layer in t.layers]
        dC_params = [rng.normal(0.0, 0.1, (t.layer_widths[l + 1], self.n_pairs))
                     for l in range(t.depth)]
        return R_params, dC_params

    # forward pieces, plain numpy; used for reporting

    def ratios(self, l: int, Rp: np.ndarray) -> np.ndarray:
        """Softmax of ``Rp`` over each source's out-edges, in topology edge order."""
        plan = self.plans[l]
        R = np.empty_like(Rp, dtype=np.float64)
        for a, b in zip(plan.starts[:-1], plan.starts[1:]):
            idx = plan.order[a:b]
            x = Rp[idx]
            ex = np.exp(x - x.max(axis=0))
            R[idx] = ex / ex.sum(axis=0)
        return R

    def added(self, l: int, theta: np.ndarray):
        """Masked softplus of ``theta``, its per-neuron sum and the cap factor."""
        plan = self.plans[l]
        soft = _soft_and_slope(theta, plan.mask)[0]
        S = soft.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(S > plan.cap, plan.cap / np.where(S > 0, S, 1.0), 1.0)
        return soft, S, scale

    def forward(self, R_params, dC_params, keep_cache: bool = False):
        """``C`` for every layer as ``(n_l, n_in**2)`` arrays, plus backward caches."""
        P = self.n_pairs
        C = [np.zeros((self.n0, P))]
        caches = []
        for l, plan in enumerate(self.plans):
            R = np.empty((len(plan.src), P))
            _shift_by_group_max(np.ascontiguousarray(R_params[l], dtype=np.float64), plan.order,
                                plan.starts, R)
            np.exp(R, out=R)
            soft, sig = _soft_and_slope(np.asarray(dC_params[l], dtype=np.float64), plan.mask)
            raw = np.empty((plan.n_dst, P))
            S = np.empty(plan.n_dst)
            scale = np.empty(plan.n_dst)
            C_out = np.empty((plan.n_dst, P))
            _layer_forward(R, plan.starts, plan.src, plan.dst, C[-1], soft, plan.cap,
                           self.pair_t, raw, S, scale, C_out)
            C.append(C_out)
            if keep_cache:
                caches.append(_Cache(R, raw, soft, sig, S, scale))
        return C, caches

    def loss(self, R_params, dC_params) -> float:
        C, _ = self.forward(R_params, dC_params)
        return float(np.sum(((self.n0 - 1) - C[-1].sum(axis=1)) ** 2))

    def loss_and_grad(self, R_params, dC_params):
        """Loss and its exact gradients with respect to both parameter sets."""
        C, caches = self.forward(R_params, dC_params, keep_cache=True)
        short = (self.n0 - 1) - C[-1].sum(axis=1)
        value = float(np.sum(short ** 2))
        g = np.repeat((-2.0 * short)[:, None], self.n_pairs, axis=1)
        gR = [None] * len(self.plans)
        gdC = [None] * len(self.plans)
        for l in range(len(self.plans) - 1, -1, -1):
            plan, c = self.plans[l], caches[l]
            gR[l] = np.empty((len(plan.src), self.n_pairs))
            gdC[l] = np.empty((plan.n_dst, self.n_pairs))
            g_prev = np.empty((self.topology.layer_widths[l], self.n_pairs))
            _layer_backward(g, gR[l], gdC[l], plan.order, plan.starts, plan.src, plan.dst,
                            C[l], plan.cap, self.pair_t, c.R, c.raw, c.soft, c.sig, c.S,
                            c.scale, g_prev)
            g = g_prev
        return value, gR, gdC

    # views in the public (i, j, k) layout

    def tensor(self, C_l: np.ndarray) -> np.ndarray:
        return C_l.T.reshape(self.n0, self.n0, C_l.shape[0])


@dataclass
class ControlState:
    """Free parameters of a controllability run plus the tensors they induce."""

    topology: Topology
    R_params: list[np.ndarray]
    dC_params: list[np.ndarray]
    loss_trace: list[tuple[int, float]] = field(default_factory=list)

    @cached_property
    def model(self) -> ControlModel:
        return ControlModel(self.topology)

    @cached_property
    def _flat(self) -> list[np.ndarray]:
        return self.model.forward(self.R_params, self.dC_params)[0]

    @property
    def C(self) -> list[np.ndarray]:
        """Controllability tensors ``C[l]`` shaped ``(n_in, n_in, n_l)``."""
        return [self.model.tensor(c) for c in self._flat]

    def ratios(self, l: int) -> np.ndarray:
        """Ratio split per edge of layer ``l`` (topology edge order), shape ``(edges, n_in, n_in)``."""
        R = self.model.ratios(l, self.R_params[l])
        return R.reshape(-1, self.model.n0, self.model.n0)

    def added_control(self, l: int) -> np.ndarray:
        """Added control ``dC`` at each neuron of layer ``l + 1``, shape ``(n_{l+1}, n_in, n_in)``."""
        soft, _, scale = self.model.added(l, self.dC_params[l])
        return (soft * scale[:, None]).reshape(-1, self.model.n0, self.model.n0)

    def loss(self) -> float:
        return control_loss(self.C[-1], self.topology.n_in)

    def invariant_violations(self, tol: float = 1e-9) -> list[str]:
        """Human-readable list of broken state invariants; empty when all hold."""
        t = self.topology
        out = []
        C = self.C
        if np.any(C[0] != 0):
            out.append("C^0 is not zero")
        for l, c in enumerate(C):
            if c.min() < -tol or c.max() > 1 + tol:
                out.append(f"C^{l} leaves [0, 1]")
            if np.any(np.einsum("iik->ik", c) != 0):
                out.append(f"C^{l} has a nonzero diagonal pair")
            if np.any(c + c.transpose(1, 0, 2) > 1 + tol):
                out.append(f"C^{l} violates C_a/b + C_b/a <= 1")
        for l, layer in enumerate(t.layers):
            R = self.ratios(l)
            if R.size:
                if R.min() < -tol or R.max() > 1 + tol:
                    out.append(f"R^{l} leaves [0, 1]")
                sums = np.zeros((t.layer_widths[l],) + R.shape[1:])
                np.add.at(sums, layer.src, R)
                has_out = np.bincount(layer.src, minlength=t.layer_widths[l]) > 0
                if np.any(np.abs(sums[has_out] - 1) > 1e-9):
                    out.append(f"R^{l} splits do not sum to 1")
            dC = self.added_control(l)
            k, tr = t.in_degrees(l)
            cap = np.minimum(tr, np.maximum(k - 1, 0))
            if dC.min() < -tol or np.any(dC.sum(axis=(1, 2)) > cap + 1e-9):
                out.append(f"dC^{l + 1} exceeds min(t, k - 1)")
        return out


@dataclass(frozen=True)
class KMatrix:
    K: np.ndarray
    mean: float
    variance: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for row in self.K:
            writer.writerow([format(x, ".9g") for x in row])
        buf.write(f"# mean={self.mean:.9g}, variance={self.variance:.9g}\n")
        return buf.getvalue()


def k_matrix(C_L: np.ndarray) -> KMatrix:
    """Sum the last-layer tensor over the second ratio index."""
    K = C_L.sum(axis=1)
    return KMatrix(K, float(K.mean()), float(K.var()))


def propagate(state: ControlState) -> np.ndarray:
    """Last-layer controllability tensor ``(n_in, n_in, n_out)``."""
    return state.C[-1]


def train_control(t: Topology, iters: int = 1000, lr: float = 0.1, seed: int = 0,
                  record_every: int = 10, callback=None) -> ControlState:
    """Plain gradient descent on the controllability loss.

    ``callback(iteration, state)``, when given, sees the state after every
    update.
    """
    if iters < 0:
        raise ValueError(f"iters must be >= 0, got {iters}")
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    model = ControlModel(t)
    R_params, dC_params = model.init_params(seed)
    trace = []
    for it in range(iters + 1):
        if it == iters:
            value = model.loss(R_params, dC_params)
        else:
            value, gR, gdC = model.loss_and_grad(R_params, dC_params)
        if not np.isfinite(value):
            raise DivergedError(it, value)
        if it % record_every == 0 or it == iters:
            trace.append((it, value))
        if it == iters:
            break
        for p, g in zip(R_params, gR):
            p -= lr * g
        for p, g in zip(dC_params, gdC):
            p -= lr * g
        if callback is not None:
            state = ControlState(t, R_params, dC_params)
            state.__dict__["model"] = model
            callback(it + 1, state)
    state = ControlState(t, R_params, dC_params, trace)
    state.__dict__["model"] = model
    return state
