"""Declarative multi-state network descriptions.

A model is a directed (possibly cyclic) graph of fixed-size states joined
by transition pipelines, plus a preprocessing head feeding the first
state, a classifier head reading one state, a weight-sharing rule, and an
input/readout schedule. Descriptions are immutable values; ``validate``
returns diagnostics instead of raising so callers can report them all at
once. The JSON config grammar round-trips losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

PIPELINES = ("conv", "deconv", "brcx2", "brcx3", "brdx2", "brdx3", "maxpool2x2")

# Number of weighted ops in each pipeline and whether they downsample (conv
# family) or upsample (deconv family). maxpool2x2 always halves and has no
# weights.
_PIPELINE_CONVS = {
    "conv": 1,
    "deconv": 1,
    "brcx2": 2,
    "brcx3": 3,
    "brdx2": 2,
    "brdx3": 3,
    "maxpool2x2": 0,
}
_UPSAMPLING = {"deconv", "brdx2", "brdx3"}

SHARING_MODES = ("time_shared", "time_unshared", "all_shared", "explicit")

PRE_NETS = ("simple", "deep")

# key of one weighted op instance: (from_state, to_state, time, slot)
WeightKey = tuple[str, str, int, int]


class ConfigError(Exception):
    """Malformed or invalid model description."""


@dataclass(frozen=True)
class StateSpec:
    name: str
    height: int
    width: int
    channels: int


@dataclass(frozen=True)
class TransitionSpec:
    """One edge of the state graph.

    active_window is the set of time steps at which the transition may
    fire; None means every step. identity_shortcut adds the source value
    to the pipeline output, turning the transition into a residual map.
    """

    from_state: str
    to_state: str
    pipeline: str
    identity_shortcut: bool = False
    active_window: frozenset[int] | None = None

    def active_at(self, t: int) -> bool:
        return self.active_window is None or t in self.active_window


@dataclass(frozen=True)
class GraphSpec:
    states: tuple[StateSpec, ...]
    transitions: tuple[TransitionSpec, ...]
    pre_net: str = "simple"
    post_net: str = "standard"
    readout_state: str = ""
    num_classes: int = 10
    input_channels: int = 3

    def state(self, name: str) -> StateSpec:
        for s in self.states:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def input_state(self) -> str:
        return self.states[0].name


@dataclass(frozen=True)
class SharingSpec:
    """How transition weight instances are tied into groups.

    time_shared ties each (from, to, slot) across its active times;
    time_unshared leaves every instance its own singleton; all_shared
    pools every convolution instance into one group. Explicit named
    groups list their member keys; keys not in any group fall back to
    singletons.
    """

    mode: str = "time_shared"
    groups: tuple[tuple[str, frozenset[WeightKey]], ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class IOSchedule:
    """When the preprocessed input is injected and when logits are read.

    input_times None means the input is re-injected at every step;
    the static regime is the singleton {0}.
    """

    input_times: frozenset[int] | None = frozenset({0})
    readout_times: frozenset[int] = frozenset()

    def injects_at(self, t: int) -> bool:
        return self.input_times is None or t in self.input_times


def intermediate_feature_size(from_channels: int, to_channels: int) -> int:
    """Feature width used inside a multi-conv pipeline: the rounded mean.

    Halves round down so the rule is deterministic.
    """
    if from_channels < 1 or to_channels < 1:
        raise ValueError("channel counts must be >= 1")
    return (from_channels + to_channels) // 2


def _scale_steps(t: TransitionSpec, src: StateSpec, dst: StateSpec) -> int | None:
    """log2 of the spatial scale factor the transition must realize.

    Returns None when the sizes are not related by a uniform power of two
    in the pipeline's direction.
    """
    up = t.pipeline in _UPSAMPLING
    a, b = (src, dst) if not up else (dst, src)
    if a.height % b.height or a.width % b.width:
        return None
    fh, fw = a.height // b.height, a.width // b.width
    if fh != fw or fh & (fh - 1):
        return None
    return fh.bit_length() - 1


def transition_conv_shapes(g: GraphSpec, t: TransitionSpec) -> list[tuple[int, int]]:
    """(in_channels, out_channels) for each weighted op of the pipeline."""
    src, dst = g.state(t.from_state), g.state(t.to_state)
    n = _PIPELINE_CONVS[t.pipeline]
    if n == 0:
        return []
    if n == 1:
        return [(src.channels, dst.channels)]
    mid = intermediate_feature_size(src.channels, dst.channels)
    chain = [src.channels] + [mid] * (n - 1) + [dst.channels]
    return list(zip(chain[:-1], chain[1:]))


def validate(g: GraphSpec, s: SharingSpec, io: IOSchedule, max_t: int = 64) -> list[str]:
    """Check every structural invariant; returns one message per violation."""
    diags: list[str] = []
    names = [st.name for st in g.states]
    if len(set(names)) != len(names):
        diags.append("state names are not unique")
    for st in g.states:
        if min(st.height, st.width, st.channels) < 1:
            diags.append(f"state {st.name}: all dimensions must be >= 1")
    by_name = {st.name: st for st in g.states}

    if g.pre_net not in PRE_NETS:
        diags.append(f"unknown pre_net {g.pre_net!r}")
    if g.post_net != "standard":
        diags.append(f"unknown post_net {g.post_net!r}")
    if g.readout_state not in by_name:
        diags.append(f"readout_state {g.readout_state!r} is not a state")
    if s.mode not in SHARING_MODES:
        diags.append(f"unknown sharing mode {s.mode!r}")

    seen_windows: dict[tuple[str, str], list[frozenset[int] | None]] = {}
    for t in g.transitions:
        tag = f"transition {t.from_state}>{t.to_state}"
        if t.from_state not in by_name or t.to_state not in by_name:
            diags.append(f"{tag}: endpoint is not a state")
            continue
        if t.pipeline not in PIPELINES:
            diags.append(f"{tag}: unknown pipeline {t.pipeline!r}")
            continue
        src, dst = by_name[t.from_state], by_name[t.to_state]
        steps = _scale_steps(t, src, dst)
        if steps is None:
            diags.append(
                f"{tag}: {src.height}x{src.width} to {dst.height}x{dst.width} is not a "
                f"power-of-two scaling in the {t.pipeline} direction"
            )
        else:
            n_convs = _PIPELINE_CONVS[t.pipeline]
            if t.pipeline == "maxpool2x2":
                if steps != 1:
                    diags.append(f"{tag}: maxpool2x2 halves sizes exactly once")
                if src.channels != dst.channels:
                    diags.append(
                        f"{tag}: maxpool2x2 cannot change channels "
                        f"({src.channels} to {dst.channels})"
                    )
            elif steps > n_convs:
                diags.append(
                    f"{tag}: {t.pipeline} has {n_convs} strided slots but needs 2^{steps} scaling"
                )
        if t.identity_shortcut and (
            (src.height, src.width, src.channels) != (dst.height, dst.width, dst.channels)
        ):
            diags.append(
                f"{tag}: identity shortcut needs identical shapes, got "
                f"{src.height}x{src.width}x{src.channels} vs {dst.height}x{dst.width}x{dst.channels}"
            )
        windows = seen_windows.setdefault((t.from_state, t.to_state), [])
        for other in windows:
            if t.active_window is None or other is None or (t.active_window & other):
                diags.append(f"{tag}: overlapping transitions for the same edge and time")
                break
        windows.append(t.active_window)
        if t.active_window is not None and any(w < 1 for w in t.active_window):
            diags.append(f"{tag}: active_window times must be >= 1")

    if io.input_times is not None:
        if not io.input_times:
            diags.append("io: input_times must not be empty")
        elif min(io.input_times) < 0:
            diags.append("io: input_times must be >= 0")
    if not io.readout_times:
        diags.append("io: readout_times must not be empty")
    elif min(io.readout_times) < 0:
        diags.append("io: readout_times must be >= 0")

    # explicit sharing groups: disjoint, known transitions, equal shapes
    if s.groups:
        shapes: dict[WeightKey, tuple[int, int]] = {}
        for t in g.transitions:
            if t.from_state in by_name and t.to_state in by_name and t.pipeline in PIPELINES:
                for slot, ch in enumerate(transition_conv_shapes(g, t)):
                    for tt in range(1, max_t + 1):
                        if t.active_at(tt):
                            shapes[(t.from_state, t.to_state, tt, slot)] = ch
        claimed: set[WeightKey] = set()
        for gid, keys in s.groups:
            group_shapes = set()
            for k in keys:
                if k in claimed:
                    diags.append(f"sharing group {gid}: key {k} appears in more than one group")
                claimed.add(k)
                if k not in shapes:
                    diags.append(f"sharing group {gid}: key {k} matches no transition instance")
                else:
                    group_shapes.add(shapes[k])
            if len(group_shapes) > 1:
                diags.append(f"sharing group {gid}: member parameter shapes differ {sorted(group_shapes)}")

    # reachability: every state must receive data within max_t steps,
    # simulating the population rule under the injection schedule
    if not diags:
        horizon = max(max_t, max(io.readout_times, default=0))
        populated: set[str] = set()
        if io.injects_at(0):
            populated.add(g.input_state)
        for t in range(1, horizon + 1):
            fresh = {
                tr.to_state
                for tr in g.transitions
                if tr.active_at(t) and tr.from_state in populated
            }
            if io.injects_at(t):
                fresh.add(g.input_state)
            populated |= fresh
        for st in g.states:
            if st.name not in populated:
                diags.append(f"state {st.name} is unreachable from the input state")
    return diags


# ---------------------------------------------------------------------------
# config file grammar (JSON object with fixed sections)

_STATE_FIELDS = {"name", "h", "w", "c"}
_TRANSITION_FIELDS = {"from", "to", "pipeline", "shortcut", "window"}
_SHARING_FIELDS = {"mode", "groups"}
_IO_FIELDS = {"input_times", "readout_times"}
_TOP_FIELDS = {"states", "transitions", "pre_net", "post_net", "readout_state",
               "num_classes", "input_channels", "sharing", "io", "train"}
TRAIN_FIELDS = {"epochs", "batch_size", "lr_schedule", "momentum", "augment", "seed",
                "subset_train", "subset_test", "weight_decay", "bn_time_specific",
                "bn_ema_decay", "readout_time"}


def _reject_unknown(obj: dict, allowed: set[str], where: str) -> None:
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"{where}: unknown field {k!r}")


def _window_from_json(v, where: str) -> frozenset[int] | None:
    if v is None or v == "all":
        return None
    if isinstance(v, list) and all(isinstance(x, int) for x in v):
        return frozenset(v)
    raise ConfigError(f"{where}: window must be \"all\", null, or a list of ints")


def _times_from_json(v, where: str) -> frozenset[int] | None:
    if v == "all":
        return None
    if isinstance(v, list) and all(isinstance(x, int) for x in v):
        return frozenset(v)
    raise ConfigError(f"{where}: times must be \"all\" or a list of ints")


def parse_config(text: str) -> tuple[GraphSpec, SharingSpec, IOSchedule]:
    """Parse a JSON model description; raises ConfigError on malformed input.

    Structural problems (unknown fields, wrong types) raise; semantic
    problems are left to ``validate``. An optional "train" section is
    checked for unknown field names but not returned here.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object")
    _reject_unknown(doc, _TOP_FIELDS, "top level")

    states = []
    for i, st in enumerate(doc.get("states", [])):
        where = f"states[{i}]"
        if not isinstance(st, dict):
            raise ConfigError(f"{where}: must be an object")
        _reject_unknown(st, _STATE_FIELDS, where)
        try:
            states.append(StateSpec(st["name"], int(st["h"]), int(st["w"]), int(st["c"])))
        except KeyError as e:
            raise ConfigError(f"{where}: missing field {e.args[0]!r}") from e

    transitions = []
    for i, tr in enumerate(doc.get("transitions", [])):
        where = f"transitions[{i}]"
        if not isinstance(tr, dict):
            raise ConfigError(f"{where}: must be an object")
        _reject_unknown(tr, _TRANSITION_FIELDS, where)
        try:
            pipeline = tr["pipeline"]
            if pipeline not in PIPELINES:
                raise ConfigError(f"{where}.pipeline: unknown pipeline {pipeline!r}")
            transitions.append(
                TransitionSpec(
                    from_state=tr["from"],
                    to_state=tr["to"],
                    pipeline=pipeline,
                    identity_shortcut=bool(tr.get("shortcut", False)),
                    active_window=_window_from_json(tr.get("window"), f"{where}.window"),
                )
            )
        except KeyError as e:
            raise ConfigError(f"{where}: missing field {e.args[0]!r}") from e

    sh = doc.get("sharing", {})
    _reject_unknown(sh, _SHARING_FIELDS, "sharing")
    mode = sh.get("mode", "time_shared")
    if mode not in SHARING_MODES:
        raise ConfigError(f"sharing.mode: unknown mode {mode!r}")
    groups = []
    for gid, keys in sh.get("groups", {}).items():
        members = []
        for j, k in enumerate(keys):
            if not (isinstance(k, list) and len(k) == 4):
                raise ConfigError(f"sharing.groups[{gid}][{j}]: key must be [from, to, t, slot]")
            members.append((str(k[0]), str(k[1]), int(k[2]), int(k[3])))
        groups.append((gid, frozenset(members)))

    io_doc = doc.get("io", {})
    _reject_unknown(io_doc, _IO_FIELDS, "io")
    io = IOSchedule(
        input_times=_times_from_json(io_doc.get("input_times", [0]), "io.input_times"),
        readout_times=frozenset(io_doc.get("readout_times", [])) or frozenset(),
    )
    if io.readout_times and not all(isinstance(x, int) for x in io.readout_times):
        raise ConfigError("io.readout_times: must be a list of ints")

    train = doc.get("train", {})
    if not isinstance(train, dict):
        raise ConfigError("train: must be an object")
    _reject_unknown(train, TRAIN_FIELDS, "train")

    g = GraphSpec(
        states=tuple(states),
        transitions=tuple(transitions),
        pre_net=doc.get("pre_net", "simple"),
        post_net=doc.get("post_net", "standard"),
        readout_state=doc.get("readout_state", states[-1].name if states else ""),
        num_classes=int(doc.get("num_classes", 10)),
        input_channels=int(doc.get("input_channels", 3)),
    )
    return g, SharingSpec(mode=mode, groups=tuple(groups)), io


def train_section(text: str) -> dict:
    """The validated "train" section of a config document (possibly empty)."""
    doc = json.loads(text)
    train = doc.get("train", {})
    _reject_unknown(train, TRAIN_FIELDS, "train")
    return train


def serialize_config(
    g: GraphSpec, s: SharingSpec, io: IOSchedule, train: dict | None = None
) -> str:
    """Inverse of parse_config; stable field order, diff-friendly layout."""
    doc: dict = {
        "states": [{"name": st.name, "h": st.height, "w": st.width, "c": st.channels}
                   for st in g.states],
        "transitions": [
            {
                "from": t.from_state,
                "to": t.to_state,
                "pipeline": t.pipeline,
                "shortcut": t.identity_shortcut,
                "window": "all" if t.active_window is None else sorted(t.active_window),
            }
            for t in g.transitions
        ],
        "pre_net": g.pre_net,
        "post_net": g.post_net,
        "readout_state": g.readout_state,
        "num_classes": g.num_classes,
        "input_channels": g.input_channels,
        "sharing": {"mode": s.mode},
        "io": {
            "input_times": "all" if io.input_times is None else sorted(io.input_times),
            "readout_times": sorted(io.readout_times),
        },
    }
    if s.groups:
        doc["sharing"]["groups"] = {
            gid: sorted([list(k) for k in keys]) for gid, keys in s.groups
        }
    if train:
        doc["train"] = train
    return json.dumps(doc, indent=2) + "\n"
