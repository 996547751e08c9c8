import json
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecascade.topology import (
    Topology,
    apply_skip_connections,
    connectivity,
    conv_param_counts,
    gen_butterfly,
    gen_clos,
    gen_dense,
    gen_hypercube,
    gen_low_rank,
    gen_parallel_butterfly,
    gen_random,
    gen_torus,
    make_topology,
)


def edge_set(t: Topology, l: int) -> set:
    layer = t.layers[l]
    return set(zip(layer.src.tolist(), layer.dst.tolist()))


def bfs_reach(t: Topology) -> np.ndarray:
    """Independent path oracle: breadth-first search from every input."""
    adj = {}
    for l, layer in enumerate(t.layers):
        for s, d in zip(layer.src.tolist(), layer.dst.tolist()):
            adj.setdefault((l, s), []).append((l + 1, d))
    out = np.zeros((t.n_in, t.n_out), dtype=bool)
    for i in range(t.n_in):
        seen = {(0, i)}
        queue = deque([(0, i)])
        while queue:
            node = queue.popleft()
            for nxt in adj.get(node, []):
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        for l, o in seen:
            if l == t.depth:
                out[i, o] = True
    return out


# closed-form and enumeration oracles

def butterfly_oracle(n, depth):
    bits = int(math.log2(n))
    return [{(i, i) for i in range(n)} | {(i ^ (1 << (t % bits)), i) for i in range(n)}
            for t in range(depth)]


def hypercube_oracle(n, depth):
    bits = int(math.log2(n))
    layer = {(i, i) for i in range(n)} | {(i ^ (1 << b), i) for i in range(n) for b in range(bits)}
    return [layer] * depth


def torus_oracle(rows, cols, depth):
    layer = set()
    for r in range(rows):
        for c in range(cols):
            me = r * cols + c
            for dr, dc in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]:
                layer.add((((r + dr) % rows) * cols + (c + dc) % cols, me))
    return [layer] * depth


@pytest.mark.parametrize("n,depth", [(2, 1), (4, 3), (8, 5), (32, 18)])
def test_butterfly_matches_enumeration(n, depth):
    t = gen_butterfly(n, depth)
    oracle = butterfly_oracle(n, depth)
    assert [edge_set(t, l) for l in range(depth)] == oracle
    assert t.edge_count == 2 * n * depth
    for l in range(depth):
        assert np.all(np.bincount(t.layers[l].dst) == 2)


@pytest.mark.parametrize("n,depth", [(2, 1), (8, 2), (32, 6)])
def test_hypercube_matches_enumeration(n, depth):
    t = gen_hypercube(n, depth)
    assert [edge_set(t, l) for l in range(depth)] == hypercube_oracle(n, depth)
    assert t.edge_count == depth * (1 + int(math.log2(n))) * n


@pytest.mark.parametrize("rows,cols,depth", [(2, 2, 1), (3, 3, 2), (8, 4, 7), (2, 5, 1)])
def test_torus_matches_enumeration(rows, cols, depth):
    t = gen_torus(rows, cols, depth)
    assert [edge_set(t, l) for l in range(depth)] == torus_oracle(rows, cols, depth)


def test_torus_dedup_and_growth():
    assert gen_torus(2, 2, 1).edge_count == 12
    for d in range(1, 4):
        assert gen_torus(4, 3, d + 1).edge_count - gen_torus(4, 3, d).edge_count == 5 * 12


@pytest.mark.parametrize("n_in,n_out,r,n_mid", [(4, 4, 2, 1), (6, 9, 3, 2), (32, 32, 8, 9), (8, 4, 2, 3)])
def test_clos_closed_form_and_structure(n_in, n_out, r, n_mid):
    t = gen_clos(n_in, n_out, r, n_mid)
    assert t.edge_count == n_mid * (n_in + n_out + r * r)
    a, b = n_in // r, n_out // r
    ingress = {(i, g * n_mid + m) for g in range(r) for m in range(n_mid)
               for i in range(g * a, (g + 1) * a)}
    middle = {(g * n_mid + m, h * n_mid + m) for m in range(n_mid) for g in range(r) for h in range(r)}
    egress = {(g * n_mid + m, o) for g in range(r) for m in range(n_mid)
              for o in range(g * b, (g + 1) * b)}
    assert [edge_set(t, l) for l in range(3)] == [ingress, middle, egress]


def test_reference_edge_counts():
    # published edge counts for the four n=32 comparison topologies
    assert gen_clos(32, 32, 8, 9).edge_count == 1152
    assert gen_hypercube(32, 6).edge_count == 1152
    assert gen_butterfly(32, 18).edge_count == 1152
    assert gen_torus(8, 4, 7).edge_count == 1120


def test_low_rank():
    t = gen_low_rank(32, 32, 4)
    assert t.edge_count == 256 and t.trainable_count == 256
    assert connectivity(gen_low_rank(32, 32, 1)).fraction == 1.0


def test_parallel_butterfly_counts_and_structure():
    t = gen_parallel_butterfly(32, 5, 3)
    assert t.trainable_count == 3 * 2 * 32 * 5
    assert t.constant_count == 3 * 32
    assert np.all(t.layers[-1].value == 1.0)
    # two 4-input 3-layer butterflies side by side, then a summation layer
    small = gen_parallel_butterfly(4, 3, 2)
    assert small.layer_widths == (4, 8, 8, 8, 4)
    single = gen_parallel_butterfly(8, 3, 1)
    bf = gen_butterfly(8, 3)
    assert [edge_set(single, l) for l in range(3)] == [edge_set(bf, l) for l in range(3)]
    assert edge_set(single, 3) == {(i, i) for i in range(8)}


def test_parallel_butterfly_blocks_are_disjoint():
    t = gen_parallel_butterfly(4, 3, 2)
    for l in range(1, 3):
        for s, d in edge_set(t, l):
            assert s // 4 == d // 4


@pytest.mark.parametrize("bad", [lambda: gen_butterfly(6, 2), lambda: gen_hypercube(12, 1),
                                 lambda: gen_parallel_butterfly(10, 2, 2), lambda: gen_clos(10, 10, 3, 2),
                                 lambda: gen_random(4, 0, 2, 0.5, 0), lambda: gen_random(4, 4, 0, 0.5, 0),
                                 lambda: gen_random(4, 4, 1, 0.0, 0)])
def test_invalid_arguments(bad):
    with pytest.raises(ValueError):
        bad()


def test_random_density_one_is_complete():
    t = gen_random(4, 4, 1, 1.0, 3)
    assert t.edge_count == 16


def test_random_edge_count_binomial():
    t = gen_random(256, 256, 3, 1 / 256, seed=7)
    trials = 3 * 256 * 256
    mean = trials / 256
    sd = math.sqrt(trials * (1 / 256) * (1 - 1 / 256))
    assert abs(t.edge_count - mean) < 4 * sd


def test_random_deterministic_and_hidden_width():
    assert gen_random(5, 7, 3, 0.4, 11) == gen_random(5, 7, 3, 0.4, 11)
    assert gen_random(5, 7, 3, 0.4, 11) != gen_random(5, 7, 3, 0.4, 12)
    assert gen_random(5, 7, 3, 0.4, 11).layer_widths == (5, 7, 7, 7)
    assert gen_random(5, 7, 3, 0.4, 11, hidden=20).layer_widths == (5, 20, 20, 7)


def test_skip_butterfly_counts():
    t = apply_skip_connections(gen_butterfly(32, 18))
    assert t.edge_count == 1152
    assert t.trainable_count == 1152 - 17 * 32 - 32 == 576
    assert t.constant_count == 18 * 32


def test_skip_dense_two():
    t = apply_skip_connections(gen_dense(2, 2))
    assert t.edge_count == 4 and t.trainable_count == 2


def test_skip_rejects_neuron_without_inputs():
    t = Topology.from_edges([2, 3], [[(0, 0), (1, 1)]])
    with pytest.raises(ValueError, match="neuron 2 of layer 1"):
        apply_skip_connections(t)


def test_skip_random_strategy_is_seeded():
    t = gen_hypercube(8, 3)
    a = apply_skip_connections(t, seed=1, strategy="random")
    b = apply_skip_connections(t, seed=1, strategy="random")
    assert a == b
    for layer in a.layers:
        assert np.all(np.bincount(layer.dst[layer.constant], minlength=8) == 1)


random_topologies = st.builds(
    gen_random,
    n_in=st.integers(1, 6), n_out=st.integers(1, 6), depth=st.integers(1, 4),
    density=st.floats(0.3, 1.0), seed=st.integers(0, 10_000))


@settings(max_examples=60, deadline=None)
@given(random_topologies)
def test_skip_properties(t):
    try:
        s = apply_skip_connections(t)
    except ValueError:
        assert any(np.bincount(l.dst, minlength=t.layer_widths[i + 1]).min() == 0
                   for i, l in enumerate(t.layers))
        return
    assert [edge_set(s, l) for l in range(t.depth)] == [edge_set(t, l) for l in range(t.depth)]
    for l, layer in enumerate(s.layers):
        per_neuron = np.bincount(layer.dst[layer.constant], minlength=t.layer_widths[l + 1])
        assert np.all(per_neuron == 1)
        assert np.all(layer.value[layer.constant] == 1.0)
    assert s.trainable_count == t.trainable_count - sum(t.layer_widths[1:])
    assert apply_skip_connections(s) == s


@settings(max_examples=60, deadline=None)
@given(random_topologies)
def test_connectivity_matches_bfs(t):
    rep = connectivity(t)
    oracle = bfs_reach(t)
    assert rep.reachable_pairs == int(oracle.sum())
    assert rep.total_pairs == t.n_in * t.n_out
    assert rep.fraction == rep.reachable_pairs / rep.total_pairs


@settings(max_examples=40, deadline=None)
@given(random_topologies, st.randoms(use_true_random=False))
def test_connectivity_permutation_invariant(t, rnd):
    pi = list(range(t.n_in))
    po = list(range(t.n_out))
    rnd.shuffle(pi)
    rnd.shuffle(po)
    layers = []
    for l, layer in enumerate(t.layers):
        src = [pi[s] if l == 0 else s for s in layer.src.tolist()]
        dst = [po[d] if l == t.depth - 1 else d for d in layer.dst.tolist()]
        layers.append(list(zip(src, dst)))
    permuted = Topology.from_edges(t.layer_widths, layers)
    assert connectivity(permuted).fraction == connectivity(t).fraction


def test_connectivity_examples():
    assert connectivity(gen_dense(5, 3)).fraction == 1.0
    isolated = Topology.from_edges([3, 3], [[(0, 0), (1, 0), (2, 1)]])
    rep = connectivity(isolated)
    assert rep.reachable_pairs == 3 and rep.fraction < 1
    assert connectivity(gen_butterfly(32, 5)).fraction == 1.0
    assert connectivity(gen_butterfly(32, 4)).fraction < 1.0
    assert connectivity(gen_clos(32, 32, 8, 9)).fraction == 1.0
    hc = connectivity(gen_hypercube(32, 1))
    assert hc.reachable_pairs == 32 * 6


def test_connectivity_sparse_random_against_closure():
    t = gen_random(256, 256, 3, 1 / 256, seed=7)
    rep = connectivity(t)
    assert rep.reachable_pairs == int(bfs_reach(t).sum())
    assert rep.fraction < 0.5


def test_conv_param_counts():
    assert conv_param_counts(3, 64, 64, 1, 1, 1.0) == (36864, 576 + 4096)
    dense, dec = conv_param_counts(3, 16, 32, 4, 2, 0.0)
    assert dec == 9 * 16 * 4
    f, c, k = 3, 8, 5
    assert conv_param_counts(f, c, k, k, 1, 1.0)[1] == f * f * c * k + c * k * k
    # pointwise part c*n*k*t*s counted on a generated layer: c*n = 64 inputs, k = 64 outputs
    t = gen_random(64, 64, 1, 1.0, 0)
    assert t.edge_count == conv_param_counts(3, 64, 64, 1, 1, 1.0)[1] - 9 * 64


def test_validation_errors():
    with pytest.raises(ValueError):
        Topology.from_edges([2, 2], [[(0, 0), (0, 0)]])
    with pytest.raises(ValueError):
        Topology.from_edges([2, 2], [[(2, 0)]])
    with pytest.raises(ValueError):
        Topology.from_edges([2, 2], [[(0, 0, float("nan"))]])
    with pytest.raises(ValueError):
        Topology.from_edges([2, 0], [[]])


def test_edges_sorted_by_dst_then_src():
    t = Topology.from_edges([3, 3], [[(2, 1), (0, 2), (1, 1), (0, 0)]])
    layer = t.layers[0]
    assert list(zip(layer.dst.tolist(), layer.src.tolist())) == [(0, 0), (1, 1), (1, 2), (2, 0)]


@settings(max_examples=40, deadline=None)
@given(random_topologies, st.booleans())
def test_json_round_trip(t, skip):
    if skip:
        try:
            t = apply_skip_connections(t)
        except ValueError:
            pass
    text = t.to_json()
    back = Topology.from_json(text)
    assert back == t
    assert back.to_json() == text


def test_json_format():
    t = apply_skip_connections(gen_dense(2, 1))
    doc = json.loads(t.to_json())
    assert set(doc) == {"name", "layer_widths", "layers"}
    assert doc["layers"][0] == [[0, 0, "c", 1.0], [1, 0, "t"]]


def test_make_topology_fills_widths():
    assert make_topology("butterfly", n=8, depth=3) == gen_butterfly(8, 3)
    assert make_topology("clos", n=32, r=8, n_mid=9) == gen_clos(32, 32, 8, 9)
    assert make_topology("hypercube", skip=True, n=8, depth=2) == \
        apply_skip_connections(gen_hypercube(8, 2))
    with pytest.raises(ValueError, match="needs parameters"):
        make_topology("low_rank", n=8)
    with pytest.raises(ValueError, match="unknown topology family"):
        make_topology("expander", n=8)


def test_sparsity_and_masks():
    t = gen_butterfly(8, 2)
    assert t.layer_sparsity(0) == 1 - 16 / 64
    masks = t.masks()
    assert masks[0].shape == (8, 8) and masks[0].sum() == 16
    k, tr = apply_skip_connections(t).in_degrees(0)
    assert np.all(k == 2) and np.all(tr == 1)


def test_generators_deterministic():
    assert gen_torus(4, 4, 2) == gen_torus(4, 4, 2)
    assert gen_parallel_butterfly(8, 3, 2) == gen_parallel_butterfly(8, 3, 2)
