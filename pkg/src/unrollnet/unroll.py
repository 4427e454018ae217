"""Compile a cyclic state graph into a time-stamped feedforward DAG.

``unroll`` walks the transition graph forward in time under the
population rule: a transition fires at step t only if its source state
has been written at some step < t, and it reads the most recent value.
Multiple writes landing on one state at the same step are summed. The
result is an acyclic node list in execution order, with every weighted
op bound to a tied parameter group and every normalization bound to
statistics specific to its time step.

``forward``/``backward`` execute the DAG against a parameter store;
gradients come back keyed by tied group, already summed over the
group's instances. Nodes that cannot influence any readout are kept in
the DAG (so unrolling is schedule-faithful) but skipped by execution
and excluded from the parameter count, mirroring how readout-dependent
parameter totals are reported.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .graph import (
    ConfigError,
    GraphSpec,
    IOSchedule,
    SharingSpec,
    TransitionSpec,
    serialize_config,
    transition_conv_shapes,
    validate,
    _scale_steps,
)

Array = np.ndarray

_DECONV_FAMILY = {"deconv", "brdx2", "brdx3"}


class UnreachableReadout(Exception):
    """The readout state holds no value at a requested readout time."""


class MissingStats(KeyError):
    """Eval-mode normalization has no stored statistics for (site, t)."""


@dataclass(frozen=True)
class Node:
    """One primitive op instance in the unrolled DAG.

    params lists the tied-group ids the op consumes (weights for
    conv/deconv, weight+bias for fc, scale+shift for a learnable bn);
    site names the statistics slot for bn nodes; key is a structural
    identity stable across different readout times.
    """

    idx: int
    op: str
    t: int
    inputs: tuple[int, ...]
    params: tuple[str, ...] = ()
    site: str | None = None
    key: tuple = ()


@dataclass(frozen=True)
class GroupInfo:
    """Canonical tensor metadata for one tied parameter group."""

    kind: str  # conv | deconv | fc_weight | fc_bias | bn_scale | bn_shift
    shape: tuple[int, ...]
    fan_in: int
    stride: int = 1
    padding: int = 0

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


@dataclass(frozen=True)
class UnrolledGraph:
    graph: GraphSpec
    sharing: SharingSpec
    io: IOSchedule
    T: int
    nodes: tuple[Node, ...]
    readouts: dict[int, int]  # readout time -> logits node idx
    state_values: dict[tuple[str, int], int]  # (state, write time) -> node idx
    live: frozenset[int]  # ancestors of the readouts; execution set
    groups: dict[str, GroupInfo]
    skipped: tuple[tuple[str, str, int], ...]  # population-suppressed firings
    config_hash: str

    def live_groups(self) -> frozenset[str]:
        gids: set[str] = set()
        for i in self.live:
            gids.update(self.nodes[i].params)
        return frozenset(gids)

    def state_at(self, state: str, t: int) -> int:
        """Node idx of the latest write to state at or before t."""
        for tw in range(t, -1, -1):
            idx = self.state_values.get((state, tw))
            if idx is not None:
                return idx
        raise UnreachableReadout(f"state {state} holds no value at t={t}")

    def dump(self) -> str:
        """One node per line: id, op, t, tied-group, input ids."""
        lines = []
        for n in self.nodes:
            group = ",".join(n.params) if n.params else (n.site or "-")
            inputs = " ".join(str(i) for i in n.inputs)
            lines.append(f"{n.idx}\t{n.op}\t{n.t}\t{group}\t{inputs}")
        return "\n".join(lines) + "\n"


def config_digest(g: GraphSpec, s: SharingSpec, io: IOSchedule) -> str:
    return hashlib.sha256(serialize_config(g, s, io).encode()).hexdigest()[:16]


def _transition_strides(g: GraphSpec, tr: TransitionSpec) -> list[int]:
    """Per-slot strides; the leading slots carry the spatial rescaling."""
    shapes = transition_conv_shapes(g, tr)
    steps = _scale_steps(tr, g.state(tr.from_state), g.state(tr.to_state))
    return [2 if i < steps else 1 for i in range(len(shapes))]


class _Builder:
    def __init__(self, g: GraphSpec, s: SharingSpec, io: IOSchedule):
        self.g = g
        self.s = s
        self.io = io
        self.nodes: list[Node] = []
        self.groups: dict[str, GroupInfo] = {}
        self.explicit: dict[tuple[str, str, int, int], str] = {}
        for gid, keys in s.groups:
            for k in keys:
                self.explicit[k] = gid

    def add(self, op, t, inputs, params=(), site=None, key=()) -> int:
        idx = len(self.nodes)
        self.nodes.append(Node(idx, op, t, tuple(inputs), tuple(params), site, key))
        return idx

    def register(self, gid: str, info: GroupInfo) -> str:
        prior = self.groups.get(gid)
        if prior is None:
            self.groups[gid] = info
        elif prior != info:
            raise ConfigError(
                f"tied group {gid}: instances disagree on parameters "
                f"({prior} vs {info})"
            )
        return gid

    def group_id(self, frm: str, to: str, t: int, slot: int) -> str:
        mode = self.s.mode
        if mode == "all_shared":
            return "conv_all"
        if mode == "time_shared":
            return f"{frm}>{to}#{slot}"
        if mode == "time_unshared":
            return f"{frm}>{to}@t{t}#{slot}"
        return self.explicit.get((frm, to, t, slot), f"{frm}>{to}@t{t}#{slot}")

    def conv_like(self, kind: str, x: int, t: int, gid: str, cin: int, cout: int,
                  stride: int, key: tuple) -> int:
        # conv weights are (cout, cin, 3, 3); deconv weights keep the conv
        # orientation, so the data-input channel count sits in axis 0
        shape = (cout, cin, 3, 3) if kind == "conv" else (cin, cout, 3, 3)
        self.register(gid, GroupInfo(kind, shape, fan_in=cin * 9, stride=stride, padding=1))
        return self.add(kind, t, (x,), params=(gid,), key=key)

    def transition(self, tr: TransitionSpec, t: int, src: int) -> int:
        """Emit the pipeline of one transition firing; returns output idx."""
        kind = "deconv" if tr.pipeline in _DECONV_FAMILY else "conv"
        shapes = transition_conv_shapes(self.g, tr)
        strides = _transition_strides(self.g, tr)
        x = src
        j = 0  # node ordinal within this firing, for structural keys

        def key():
            nonlocal j
            j += 1
            return ("tr", tr.from_state, tr.to_state, t, j - 1)

        if tr.pipeline == "maxpool2x2":
            x = self.add("maxpool", t, (x,), key=key())
        elif tr.pipeline in ("conv", "deconv"):
            gid = self.group_id(tr.from_state, tr.to_state, t, 0)
            x = self.conv_like(kind, x, t, gid, shapes[0][0], shapes[0][1],
                               strides[0], key())
        else:
            # bn-relu-(de)conv repeated per slot
            for slot, (cin, cout) in enumerate(shapes):
                site = f"{tr.from_state}>{tr.to_state}:bn{slot}"
                x = self.add("bn", t, (x,), site=site, key=key())
                x = self.add("relu", t, (x,), key=key())
                gid = self.group_id(tr.from_state, tr.to_state, t, slot)
                x = self.conv_like(kind, x, t, gid, cin, cout, strides[slot], key())
        if tr.identity_shortcut:
            x = self.add("add", t, (x, src), key=key())
        return x


def unroll(g: GraphSpec, s: SharingSpec, io: IOSchedule, T: int) -> UnrolledGraph:
    """Build the execution DAG for readout horizon T.

    Raises ConfigError when the description is invalid and
    UnreachableReadout when a requested readout time precedes any write
    to the readout state.
    """
    diags = validate(g, s, io, max_t=T)
    if diags:
        raise ConfigError("; ".join(diags))
    if not io.readout_times:
        raise ConfigError("io.readout_times is empty")
    if T < max(io.readout_times):
        raise ValueError(f"T={T} is below the last readout time {max(io.readout_times)}")

    b = _Builder(g, s, io)
    first = g.input_state
    c1 = g.state(first).channels

    # pre-net: runs once on the raw batch; its output is what injections add
    x = b.add("input", 0, (), key=("input",))
    chain = ["conv"] if g.pre_net == "simple" else ["conv", "bn", "relu", "conv", "bn", "relu", "conv"]
    cin = g.input_channels
    for k, op in enumerate(chain):
        if op == "conv":
            gid = b.register(f"prenet#{k}",
                             GroupInfo("conv", (c1, cin, 3, 3), fan_in=cin * 9, padding=1))
            x = b.add("conv", 0, (x,), params=(gid,), key=("prenet", k))
            cin = c1
        elif op == "bn":
            x = b.add("bn", 0, (x,), site=f"prenet:{k}", key=("prenet", k))
        else:
            x = b.add("relu", 0, (x,), key=("prenet", k))
    prenet_out = x

    state_val: dict[str, int] = {}
    state_values: dict[tuple[str, int], int] = {}
    skipped: list[tuple[str, str, int]] = []
    if io.injects_at(0):
        state_val[first] = prenet_out
        state_values[(first, 0)] = prenet_out

    order = sorted(g.transitions, key=lambda tr: (tr.from_state, tr.to_state))
    for t in range(1, T + 1):
        contrib: dict[str, list[tuple[tuple, int]]] = {}
        if io.injects_at(t):
            # injection sorts ahead of any transition contribution
            contrib.setdefault(first, []).append((("", ""), prenet_out))
        for tr in order:
            if not tr.active_at(t):
                continue
            if tr.from_state not in state_val:
                skipped.append((tr.from_state, tr.to_state, t))
                continue
            out = b.transition(tr, t, state_val[tr.from_state])
            contrib.setdefault(tr.to_state, []).append(((tr.from_state, tr.pipeline), out))
        for state in sorted(contrib):
            entries = sorted(contrib[state], key=lambda e: e[0])
            idxs = [i for _, i in entries]
            val = idxs[0] if len(idxs) == 1 else b.add("sum", t, tuple(idxs),
                                                       key=("sum", state, t))
            state_val[state] = val
            state_values[(state, t)] = val

    # classifier head per readout time: bn-relu-gap-fc
    readouts: dict[int, int] = {}
    cr = g.state(g.readout_state).channels
    for tr_ in sorted(io.readout_times):
        src = None
        for tw in range(tr_, -1, -1):
            src = state_values.get((g.readout_state, tw))
            if src is not None:
                break
        if src is None:
            raise UnreachableReadout(
                f"readout state {g.readout_state} is unpopulated at t={tr_}"
            )
        b.register("postnet.bn.scale", GroupInfo("bn_scale", (cr,), fan_in=cr))
        b.register("postnet.bn.shift", GroupInfo("bn_shift", (cr,), fan_in=cr))
        x = b.add("bn", tr_, (src,), params=("postnet.bn.scale", "postnet.bn.shift"),
                  site="postnet", key=("post", tr_, 0))
        x = b.add("relu", tr_, (x,), key=("post", tr_, 1))
        x = b.add("gap", tr_, (x,), key=("post", tr_, 2))
        b.register("postnet.fc.w", GroupInfo("fc_weight", (g.num_classes, cr), fan_in=cr))
        b.register("postnet.fc.b", GroupInfo("fc_bias", (g.num_classes,), fan_in=cr))
        x = b.add("fc", tr_, (x,), params=("postnet.fc.w", "postnet.fc.b"),
                  key=("post", tr_, 3))
        readouts[tr_] = x

    # live set: everything that can influence some readout
    live: set[int] = set()
    stack = list(readouts.values())
    while stack:
        i = stack.pop()
        if i in live:
            continue
        live.add(i)
        stack.extend(b.nodes[i].inputs)

    return UnrolledGraph(
        graph=g, sharing=s, io=io, T=T,
        nodes=tuple(b.nodes), readouts=readouts, state_values=state_values,
        live=frozenset(live), groups=b.groups, skipped=tuple(skipped),
        config_hash=config_digest(g, s, io),
    )


def wall_clock_estimate(t: int) -> tuple[int, int]:
    """Biological wall-clock range for t transition steps, in milliseconds."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return 20 * t, 50 * t


def param_count(u: UnrolledGraph, s: SharingSpec | None = None) -> int:
    """Learnable parameter total, counting each tied group once.

    Groups none of whose instances can influence a readout contribute
    nothing, so the total varies with readout time exactly as reported
    parameter counts do.
    """
    return sum(u.groups[gid].size for gid in sorted(u.live_groups()))


def _conv_params(store, u: UnrolledGraph, gid: str) -> ops.ConvParams:
    gi = u.groups[gid]
    return ops.ConvParams(store.weights[gid], None, gi.stride, gi.padding)


def forward(u: UnrolledGraph, store, batch: Array, mode: str = "train",
            record: str = "ema", ema_decay: float = 0.9):
    """Run the DAG; returns ({readout time: logits}, cache for backward).

    Train mode normalizes every bn node with the current batch's
    statistics and records them into the store ("ema" for running
    estimates, "pooled" for an exact-recompute pass, "none" to leave
    the store untouched). Eval mode reads stored statistics and raises
    MissingStats naming the (site, t) slot when they are absent.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if record not in ("ema", "pooled", "none"):
        raise ValueError(f"record must be ema, pooled or none, got {record!r}")
    hw = (u.graph.state(u.graph.input_state).height, u.graph.state(u.graph.input_state).width)
    if batch.ndim != 4 or batch.shape[1] != u.graph.input_channels or batch.shape[2:] != hw:
        raise ValueError(
            f"batch shape {batch.shape} does not match expected "
            f"(N, {u.graph.input_channels}, {hw[0]}, {hw[1]})"
        )

    vals: list = [None] * len(u.nodes)
    bn_used: dict[int, ops.BnStats] = {}
    for node in u.nodes:
        if node.idx not in u.live:
            continue
        op = node.op
        if op == "input":
            vals[node.idx] = batch
            continue
        x = vals[node.inputs[0]]
        if op == "conv":
            out = ops.conv2d(x, _conv_params(store, u, node.params[0]))
        elif op == "deconv":
            out = ops.deconv2d(x, _conv_params(store, u, node.params[0]))
        elif op == "bn":
            if mode == "train":
                st = ops.compute_bn_stats(x)
                if record == "ema":
                    store.update_bn_ema(node.site, node.t, st.mean, st.var,
                                        decay=ema_decay)
                elif record == "pooled":
                    m = x.shape[0] * x.shape[2] * x.shape[3]
                    store.pool_bn(node.site, node.t, st.mean, st.var, m)
            else:
                mean, var = store.get_bn(node.site, node.t)
                st = ops.BnStats(mean=mean, var=var)
            if node.params:
                st = replace(st, scale=store.weights[node.params[0]],
                             shift=store.weights[node.params[1]])
            bn_used[node.idx] = st
            out = ops.batchnorm(x, st)
        elif op == "relu":
            out = ops.relu(x)
        elif op == "add":
            out = ops.add(x, vals[node.inputs[1]])
        elif op == "sum":
            out = x + vals[node.inputs[1]]
            for i in node.inputs[2:]:
                out += vals[i]
        elif op == "maxpool":
            out = ops.maxpool2x2(x)
        elif op == "gap":
            out = ops.global_avg_pool(x)
        elif op == "fc":
            out = ops.fully_connected(x, store.weights[node.params[0]],
                                      store.weights[node.params[1]])
        else:
            raise AssertionError(f"unknown op {op}")
        vals[node.idx] = out

    logits = {t: vals[i] for t, i in u.readouts.items()}
    cache = {"vals": vals, "bn": bn_used, "mode": mode}
    return logits, cache


def backward(u: UnrolledGraph, store, cache, dlogits: dict[int, Array]) -> dict[str, Array]:
    """Backpropagate per-readout logit gradients through the DAG.

    Returns gradients keyed by tied group id; each entry is the sum of
    the per-instance gradients of that group, which is exactly the
    update direction for shared weights. Covers every group reachable
    from the requested readouts.
    """
    vals = cache["vals"]
    train_bn = cache["mode"] == "train"
    gvals: list = [None] * len(u.nodes)

    def accum(i: int, arr: Array) -> None:
        gvals[i] = arr if gvals[i] is None else gvals[i] + arr

    for t, dl in dlogits.items():
        accum(u.readouts[t], dl)

    grads: dict[str, Array] = {}

    def gacc(gid: str, arr: Array) -> None:
        if gid in grads:
            grads[gid] += arr
        else:
            grads[gid] = arr

    for node in reversed(u.nodes):
        gy = gvals[node.idx]
        if gy is None:
            continue
        op = node.op
        if op == "input":
            continue
        x = vals[node.inputs[0]]
        if op == "conv":
            dx, dw, _ = ops.conv2d_backward(gy, x, _conv_params(store, u, node.params[0]))
            gacc(node.params[0], dw)
            accum(node.inputs[0], dx)
        elif op == "deconv":
            dx, dw = ops.deconv2d_backward(gy, x, _conv_params(store, u, node.params[0]))
            gacc(node.params[0], dw)
            accum(node.inputs[0], dx)
        elif op == "bn":
            st = cache["bn"][node.idx]
            bwd = ops.batchnorm_train_backward if train_bn else ops.batchnorm_backward
            dx, dscale, dshift = bwd(gy, x, st)
            if node.params:
                gacc(node.params[0], dscale)
                gacc(node.params[1], dshift)
            accum(node.inputs[0], dx)
        elif op == "relu":
            accum(node.inputs[0], ops.relu_backward(gy, x))
        elif op in ("add", "sum"):
            for i in node.inputs:
                accum(i, gy)
        elif op == "maxpool":
            accum(node.inputs[0], ops.maxpool2x2_backward(gy, x))
        elif op == "gap":
            accum(node.inputs[0], ops.global_avg_pool_backward(gy, x.shape))
        elif op == "fc":
            dx, dw, db = ops.fully_connected_backward(gy, x, store.weights[node.params[0]])
            gacc(node.params[0], dw)
            gacc(node.params[1], db)
            accum(node.inputs[0], dx)
        else:
            raise AssertionError(f"unknown op {op}")
    return grads
