"""Unrolling semantics: population, sharing, equivalence, gradients.

The key oracles here are independent reimplementations: a direct
recurrence loop for the residual-network equivalence, an untied clone
for the gradient-sum law, a brute-force node walk for parameter
counting, and central finite differences for end-to-end gradients.
"""

import numpy as np
import pytest

from conftest import finite_diff, rel_err
from unrollnet import ops
from unrollnet.graph import (
    ConfigError,
    GraphSpec,
    IOSchedule,
    SharingSpec,
    StateSpec,
    TransitionSpec,
)
from unrollnet.presets import preset
from unrollnet.store import ParamStore
from unrollnet.unroll import (
    UnreachableReadout,
    backward,
    forward,
    param_count,
    unroll,
    wall_clock_estimate,
)


def build(name, T=None, **kw):
    p = preset(name, t=T, **kw)
    u = unroll(p.graph, p.sharing, p.io, p.default_t)
    return p, u


def small_resnet(T, width=4, time_shared=True):
    p = preset("resnet_1state", t=T, widths=(width,), time_shared=time_shared)
    return p, unroll(p.graph, p.sharing, p.io, T)


# ---------------------------------------------------------------- structure

def test_chain_of_residual_blocks_shares_one_group():
    _, u = small_resnet(3)
    conv_nodes = [n for n in u.nodes if n.op == "conv" and not n.params[0].startswith("prenet")]
    assert len(conv_nodes) == 6  # two convs per block, three blocks
    slot0 = {n.params[0] for n in conv_nodes if n.params[0].endswith("#0")}
    slot1 = {n.params[0] for n in conv_nodes if n.params[0].endswith("#1")}
    assert len(slot0) == 1 and len(slot1) == 1
    adds = [n for n in u.nodes if n.op == "add"]
    assert len(adds) == 3


def test_unshared_time_weights_make_singleton_groups():
    _, u = small_resnet(3, time_shared=False)
    conv_gids = {n.params[0] for n in u.nodes
                 if n.op == "conv" and not n.params[0].startswith("prenet")}
    assert len(conv_gids) == 6  # 2 slots x 3 times


def test_population_rule_fullrec_2state():
    p = preset("fullrec_2state", t=2, widths=(4, 4))
    u = unroll(p.graph, p.sharing, p.io, 2)
    fired = {(f, t, tt) for f, t, tt in _firings(u)}
    assert ("s1", "s1", 1) in fired and ("s1", "s2", 1) in fired
    assert ("s2", "s1", 1) not in fired and ("s2", "s2", 1) not in fired
    assert ("s2", "s1", 2) in fired and ("s2", "s2", 2) in fired
    assert ("s2", "s1", 1) in u.skipped and ("s2", "s2", 1) in u.skipped


def _firings(u):
    out = set()
    for n in u.nodes:
        if n.key and n.key[0] == "tr":
            out.add((n.key[1], n.key[2], n.key[3]))
    return out


def test_readout_time_nesting():
    p5 = preset("fullrec_2state", t=5, widths=(4, 4))
    p10 = preset("fullrec_2state", t=10, widths=(4, 4))
    u5 = unroll(p5.graph, p5.sharing, p5.io, 5)
    u10 = unroll(p10.graph, p10.sharing, p10.io, 10)
    core5 = {n.key for n in u5.nodes if n.key[0] != "post"}
    core10 = {n.key for n in u10.nodes if n.key[0] != "post"}
    assert core5 < core10


def test_unroll_is_deterministic():
    _, ua = build("fullrec_3state", T=3, widths=(4, 8, 16))
    _, ub = build("fullrec_3state", T=3, widths=(4, 8, 16))
    assert [n.key for n in ua.nodes] == [n.key for n in ub.nodes]
    assert ua.dump() == ub.dump()


def test_unreachable_readout_raises():
    # s2 is reachable (written at t=5) so the description validates, but
    # the earlier requested readout at t=2 precedes any write to it
    g = GraphSpec(
        states=(StateSpec("s1", 8, 8, 4), StateSpec("s2", 8, 8, 4)),
        transitions=(
            TransitionSpec("s1", "s1", "brcx2", True),
            TransitionSpec("s1", "s2", "brcx2", active_window=frozenset({5})),
        ),
        readout_state="s2",
    )
    io = IOSchedule(readout_times=frozenset({2, 6}))
    with pytest.raises(UnreachableReadout, match="s2"):
        unroll(g, SharingSpec(), io, 6)


def test_unroll_rejects_invalid_spec():
    g = GraphSpec(
        states=(StateSpec("s1", 8, 8, 4),),
        transitions=(TransitionSpec("s1", "s1", "maxpool2x2"),),
        readout_state="s1",
    )
    with pytest.raises(ConfigError):
        unroll(g, SharingSpec(), IOSchedule(readout_times=frozenset({2})), 2)


def test_t_below_readout_rejected():
    p = preset("resnet_1state", t=5, widths=(4,))
    with pytest.raises(ValueError, match="readout"):
        unroll(p.graph, p.sharing, p.io, 3)


def test_every_bn_node_is_time_bound():
    _, u = build("fullrec_2state", T=4, widths=(4, 4))
    for n in u.nodes:
        if n.op == "bn":
            assert n.site is not None and n.t >= 0


def test_dump_format():
    _, u = small_resnet(3)
    lines = u.dump().strip().split("\n")
    assert len(lines) == len(u.nodes)
    first = lines[0].split("\t")
    assert first[0] == "0" and first[1] == "input"
    for line in lines:
        idx, op, t, group, _ = line.split("\t")
        int(idx), int(t)
        assert op and group


def test_wall_clock_estimate():
    assert wall_clock_estimate(10) == (200, 500)
    assert wall_clock_estimate(0) == (0, 0)
    assert wall_clock_estimate(1) == (20, 50)
    with pytest.raises(ValueError):
        wall_clock_estimate(-1)


# ---------------------------------------------------------------- execution

def test_zero_transition_weights_collapse_to_identity(rng):
    """With the residual pipeline's conv weights zero, each block is the
    identity, so logits are the head applied straight to the pre-net
    output, for any readout time."""
    outs = []
    for T in (1, 4):
        p, u = small_resnet(T)
        store = ParamStore.init(p.sharing, u, seed=0, dtype=np.float64)
        for gid in store.weights:
            if not gid.startswith(("prenet", "postnet")):
                store.weights[gid][:] = 0
        x = np.random.default_rng(7).standard_normal((2, 3, 32, 32))
        logits, _ = forward(u, store, x, mode="train", record="none")
        outs.append(logits[T])
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-10)


def test_forward_equals_direct_recurrence(rng):
    """resnet_1state forward == independent loop h_t = K(h_{t-1}) + h_{t-1}.

    The oracle reimplements the whole network from the stored tensors:
    pre-net conv, T residual steps of bn-relu-conv-bn-relu-conv plus
    shortcut, then bn-relu-gap-fc, using eval-mode statistics.
    """
    T = 10
    p, u = small_resnet(T, width=5)
    store = ParamStore.init(p.sharing, u, seed=3, dtype=np.float64)
    x = rng.standard_normal((2, 3, 32, 32))
    # populate eval statistics from one training pass
    forward(u, store, x, mode="train", record="ema")
    logits, _ = forward(u, store, x, mode="eval")

    def bn(v, site, t):
        mean, var = store.get_bn(site, t)
        return (v - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + ops.BN_EPSILON)

    def K(h, t):
        v = bn(h, "s1>s1:bn0", t)
        v = np.maximum(v, 0)
        v = ops.conv2d(v, ops.ConvParams(store.weights["s1>s1#0"], None, 1, 1))
        v = bn(v, "s1>s1:bn1", t)
        v = np.maximum(v, 0)
        return ops.conv2d(v, ops.ConvParams(store.weights["s1>s1#1"], None, 1, 1))

    h = ops.conv2d(x, ops.ConvParams(store.weights["prenet#0"], None, 1, 1))
    for t in range(1, T + 1):
        h = K(h, t) + h
    v = bn(h, "postnet", T)
    v = v * store.weights["postnet.bn.scale"][None, :, None, None]
    v = v + store.weights["postnet.bn.shift"][None, :, None, None]
    v = np.maximum(v, 0).mean(axis=(2, 3))
    want = v @ store.weights["postnet.fc.w"].T + store.weights["postnet.fc.b"]

    assert rel_err(logits[T], want) < 1e-6


def test_inhomogeneous_injection_adds_prenet_every_step(rng):
    """With input re-injection, the first state at t equals the transition
    contributions plus the pre-net output."""
    g = GraphSpec(
        states=(StateSpec("s1", 8, 8, 3),),
        transitions=(TransitionSpec("s1", "s1", "brcx2", True),),
        readout_state="s1",
        input_channels=3,
    )
    io_inh = IOSchedule(input_times=None, readout_times=frozenset({2}))
    io_delta = IOSchedule(input_times=frozenset({0}), readout_times=frozenset({2}))
    s = SharingSpec()
    u_inh = unroll(g, s, io_inh, 2)
    u_delta = unroll(g, s, io_delta, 2)
    store = ParamStore.init(s, u_inh, seed=1, dtype=np.float64)
    x = rng.standard_normal((2, 3, 8, 8))
    _, cache_i = forward(u_inh, store, x, mode="train", record="none")
    _, cache_d = forward(u_delta, store, x, mode="train", record="none")
    prenet = ops.conv2d(x, ops.ConvParams(store.weights["prenet#0"], None, 1, 1))
    for t in (1, 2):
        hi = cache_i["vals"][u_inh.state_values[("s1", t)]]
        # the delta-input twin diverges after t=1 because its state history
        # differs; compare step t=1 directly, then check the sum structure
        if t == 1:
            hd = cache_d["vals"][u_delta.state_values[("s1", 1)]]
            np.testing.assert_allclose(hi, hd + prenet, rtol=1e-10)
    has_sum = any(n.op == "sum" for n in u_inh.nodes)
    assert has_sum and not any(n.op == "sum" for n in u_delta.nodes)


def test_tied_gradient_is_sum_of_untied_instance_gradients(rng):
    """Eq-of-motion for sharing: clone the shared model into per-time
    singleton groups with identical weights; the shared gradient must
    equal the sum of the per-time gradients, to 1e-10."""
    T = 3
    p_shared, u_shared = small_resnet(T, width=4, time_shared=True)
    p_untied, u_untied = small_resnet(T, width=4, time_shared=False)

    shared = ParamStore.init(p_shared.sharing, u_shared, seed=5, dtype=np.float64)
    untied = ParamStore.init(p_untied.sharing, u_untied, seed=6, dtype=np.float64)
    for gid in untied.weights:
        if gid.startswith("s1>s1@"):
            slot = gid.split("#")[1]
            untied.weights[gid] = shared.weights[f"s1>s1#{slot}"].copy()
        else:
            untied.weights[gid] = shared.weights[gid].copy()

    x = rng.standard_normal((4, 3, 32, 32))
    labels = np.array([0, 1, 2, 3])

    def grads_of(u, store):
        logits, cache = forward(u, store, x, mode="train", record="none")
        _, dl = ops.softmax_cross_entropy(logits[T], labels)
        return backward(u, store, cache, {T: dl})

    g_shared = grads_of(u_shared, shared)
    g_untied = grads_of(u_untied, untied)

    for slot in (0, 1):
        total = sum(g_untied[f"s1>s1@t{t}#{slot}"] for t in range(1, T + 1))
        assert rel_err(g_shared[f"s1>s1#{slot}"], total) < 1e-10
    # the singleton heads agree exactly too
    assert rel_err(g_shared["postnet.fc.w"], g_untied["postnet.fc.w"]) < 1e-12


def test_two_tied_scalar_instances_sum_example():
    """Two instances with per-instance gradients 0.5 and 1.5 yield 2.0."""
    # realized through the public surface: a 2-step shared chain where the
    # per-step gradients are measured on the untied twin, then compared
    T = 2
    p_s, u_s = small_resnet(T, width=2, time_shared=True)
    p_u, u_u = small_resnet(T, width=2, time_shared=False)
    shared = ParamStore.init(p_s.sharing, u_s, seed=11, dtype=np.float64)
    untied = ParamStore.init(p_u.sharing, u_u, seed=12, dtype=np.float64)
    for gid in untied.weights:
        src = gid.split("@")[0] + "#" + gid.split("#")[1] if "@" in gid else gid
        untied.weights[gid] = shared.weights[src].copy()
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
    labels = np.array([1, 2])

    def grads_of(u, store):
        logits, cache = forward(u, store, x, mode="train", record="none")
        _, dl = ops.softmax_cross_entropy(logits[T], labels)
        return backward(u, store, cache, {T: dl})

    gs = grads_of(u_s, shared)
    gu = grads_of(u_u, untied)
    per_instance = [gu[f"s1>s1@t{t}#0"] for t in (1, 2)]
    np.testing.assert_allclose(gs["s1>s1#0"], per_instance[0] + per_instance[1],
                               rtol=1e-10, atol=1e-12)


def _toy_two_state():
    """4x4 states, 2 channels, T=3: the end-to-end gradient fixture."""
    g = GraphSpec(
        states=(StateSpec("a", 4, 4, 2), StateSpec("b", 4, 4, 2)),
        transitions=(
            TransitionSpec("a", "a", "brcx2", True),
            TransitionSpec("a", "b", "brcx2"),
            TransitionSpec("b", "a", "brcx2"),
            TransitionSpec("b", "b", "brcx2", True),
        ),
        readout_state="b",
        input_channels=3,
    )
    io = IOSchedule(readout_times=frozenset({3}))
    return g, SharingSpec(), io


def test_end_to_end_gradients_match_finite_differences(rng):
    """Every weight of every tied group, checked by central differences
    through the full train-mode forward (batch statistics included)."""
    g, s, io = _toy_two_state()
    u = unroll(g, s, io, 3)
    store = ParamStore.init(s, u, seed=9, dtype=np.float64)
    x = rng.standard_normal((3, 3, 4, 4))
    labels = np.array([1, 5, 0])

    logits, cache = forward(u, store, x, mode="train", record="none")
    _, dl = ops.softmax_cross_entropy(logits[3], labels)
    grads = backward(u, store, cache, {3: dl})

    def loss_with(gid):
        def f(w):
            old = store.weights[gid]
            store.weights[gid] = w
            try:
                lg, _ = forward(u, store, x, mode="train", record="none")
                return ops.softmax_cross_entropy(lg[3], labels)[0]
            finally:
                store.weights[gid] = old
        return f

    for gid in sorted(u.live_groups()):
        fd = finite_diff(loss_with(gid), store.weights[gid].copy())
        assert rel_err(grads[gid], fd) < 1e-4, f"gradient mismatch for {gid}"


# ---------------------------------------------------------------- counting

def _param_oracle(u):
    """Brute-force node walk: BFS from the readouts, collect tied groups,
    then size each group's canonical tensor by first principles."""
    reach = set()
    stack = list(u.readouts.values())
    while stack:
        i = stack.pop()
        if i in reach:
            continue
        reach.add(i)
        stack.extend(u.nodes[i].inputs)
    gids = set()
    for i in reach:
        gids.update(u.nodes[i].params)
    total = 0
    for gid in gids:
        gi = u.groups[gid]
        n = 1
        for d in gi.shape:
            n *= d
        total += n
    return total


@pytest.mark.parametrize("name", ["resnet_1state", "resnet_3state", "fullrec_2state",
                                  "fullrec_3state", "adjacent_3state", "adjacent_4state",
                                  "allshared_3state", "inhomogeneous_3state"])
def test_param_count_matches_node_walk(name):
    p, u = build(name, widths=None)
    assert param_count(u, p.sharing) == _param_oracle(u)


def test_param_count_single_conv_formula():
    # 3x3 conv 64->64 without bias: 36,864 parameters
    p = preset("allshared_3state", widths=(64, 64, 64))
    u = unroll(p.graph, p.sharing, p.io, p.default_t)
    assert u.groups["conv_all"].size == 3 * 3 * 64 * 64 == 36864


def test_param_count_invariant_to_T_with_time_sharing():
    _, u3 = small_resnet(3)
    _, u10 = small_resnet(10)
    assert param_count(u3) == param_count(u10)


def test_param_count_excludes_non_contributing_transition():
    """fullrec_2state at T=2: s2->s1 fires at t=2 but cannot influence the
    t=2 readout of s2, so its parameters are not counted."""
    p2 = preset("fullrec_2state", t=2, widths=(4, 4))
    u2 = unroll(p2.graph, p2.sharing, p2.io, 2)
    p3 = preset("fullrec_2state", t=3, widths=(4, 4))
    u3 = unroll(p3.graph, p3.sharing, p3.io, 3)
    gids2 = u2.live_groups()
    assert not any(g.startswith("s2>s1#") for g in gids2)
    assert any(g.startswith("s2>s1#") for g in u3.live_groups())
    delta = param_count(u3) - param_count(u2)
    s2s1 = sum(u3.groups[g].size for g in u3.groups if g.startswith("s2>s1#"))
    assert delta == s2s1
    assert param_count(u2) == _param_oracle(u2)


def test_allshared_has_single_conv_group():
    p, u = build("allshared_3state")
    conv_groups = {gid for gid, gi in u.groups.items()
                   if gi.kind == "conv" and not gid.startswith("prenet")}
    assert conv_groups == {"conv_all"}
