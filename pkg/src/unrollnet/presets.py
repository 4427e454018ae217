"""Named model families used throughout the experiments.

Every preset returns a validated (GraphSpec, SharingSpec, IOSchedule)
triple plus a default readout time, addressable from the CLI. Options
shrink or reshape a family without changing its topology: readout time,
channel widths, time sharing, pre-net depth, class count.

Conventions shared by all presets: self-transitions are two-conv
residual pipelines (brcx2 with an identity shortcut); downward cross
transitions use the conv family; upward cross transitions use the
deconv family; cross transitions carry no shortcut.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import (
    GraphSpec,
    IOSchedule,
    SharingSpec,
    StateSpec,
    TransitionSpec,
    validate,
)

PRESET_NAMES = (
    "resnet_1state",
    "resnet_3state",
    "fullrec_2state",
    "fullrec_3state",
    "adjacent_3state",
    "adjacent_4state",
    "allshared_3state",
    "inhomogeneous_3state",
)


@dataclass(frozen=True)
class Preset:
    graph: GraphSpec
    sharing: SharingSpec
    io: IOSchedule
    default_t: int


def _self(name: str, window=None) -> TransitionSpec:
    return TransitionSpec(name, name, "brcx2", identity_shortcut=True,
                          active_window=window)


def _ladder_states(widths: tuple[int, ...], base_hw: int = 32) -> tuple[StateSpec, ...]:
    """States halving spatially at each rung: 32x32, 16x16, 8x8, ..."""
    return tuple(
        StateSpec(f"s{i + 1}", base_hw >> i, base_hw >> i, c)
        for i, c in enumerate(widths)
    )


def _sharing(time_shared: bool) -> SharingSpec:
    return SharingSpec(mode="time_shared" if time_shared else "time_unshared")


def _windowed_ladder(
    widths: tuple[int, ...],
    cross_pipeline: str,
    phase: int = 4,
) -> tuple[tuple[StateSpec, ...], tuple[TransitionSpec, ...], int]:
    """Ladder with per-state self-transition phases and single cross steps.

    State k runs its self-transition for (phase-1) consecutive steps,
    then hands off to state k+1 at the phase boundary: windows
    {1..3}, {4}, {5..7}, {8}, ... for phase=4. Returns the default
    readout time (the last step of the final self window).
    """
    states = _ladder_states(widths)
    transitions = []
    t0 = 1
    for i, st in enumerate(states):
        window = frozenset(range(t0, t0 + phase - 1))
        transitions.append(_self(st.name, window))
        t0 += phase - 1
        if i + 1 < len(states):
            transitions.append(
                TransitionSpec(st.name, states[i + 1].name, cross_pipeline,
                               active_window=frozenset({t0}))
            )
            t0 += 1
    return states, tuple(transitions), t0 - 1


def _fully_recurrent(states: tuple[StateSpec, ...]) -> tuple[TransitionSpec, ...]:
    transitions = []
    for i, a in enumerate(states):
        for j, b in enumerate(states):
            if i == j:
                transitions.append(_self(a.name))
            else:
                # conv family when the target is not spatially larger,
                # deconv family when it is
                pipe = "brcx2" if a.height >= b.height else "brdx2"
                transitions.append(TransitionSpec(a.name, b.name, pipe))
    return tuple(transitions)


def _adjacent(states: tuple[StateSpec, ...], include_self: bool) -> tuple[TransitionSpec, ...]:
    transitions = []
    for i, a in enumerate(states):
        if include_self:
            transitions.append(_self(a.name))
        if i + 1 < len(states):
            b = states[i + 1]
            transitions.append(TransitionSpec(a.name, b.name, "brcx2"))
            transitions.append(TransitionSpec(b.name, a.name, "brdx2"))
    return tuple(transitions)


def preset(
    name: str,
    t: int | None = None,
    widths: tuple[int, ...] | None = None,
    time_shared: bool = True,
    include_self: bool = True,
    deep_prenet: bool | None = None,
    num_classes: int = 10,
) -> Preset:
    """Build a named architecture.

    t overrides the readout time; widths overrides per-state channel
    counts (length must match the family's state count); include_self
    only affects the adjacent families; deep_prenet defaults to the
    family's own convention when None.
    """
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")

    pre_net = "simple"
    sharing = _sharing(time_shared)

    if name == "resnet_1state":
        w = widths or (64,)
        states = (StateSpec("s1", 32, 32, w[0]),)
        transitions = (_self("s1"),)
        default_t = t if t is not None else 10
        readout = "s1"
    elif name == "resnet_3state":
        w = widths or (16, 32, 64)
        states, transitions, ladder_t = _windowed_ladder(w, "conv")
        default_t = t if t is not None else ladder_t
        readout = states[-1].name
    elif name == "allshared_3state":
        # Cross transitions are weightless 2x2 max pools, so the only conv
        # weights live in the (equal-width) self-transitions; one group
        # covers them all.
        w = widths or (64, 64, 64)
        if len(set(w)) != 1:
            raise ValueError("allshared_3state needs one feature width for all states")
        states, transitions, ladder_t = _windowed_ladder(w, "maxpool2x2")
        default_t = t if t is not None else ladder_t
        readout = states[-1].name
        sharing = SharingSpec(mode="all_shared")
    elif name == "fullrec_2state":
        w = widths or (64, 64)
        states = _ladder_states(w[:1]) + (StateSpec("s2", 32, 32, w[1]),)
        transitions = _fully_recurrent(states)
        default_t = t if t is not None else 10
        readout = "s2"
    elif name == "fullrec_3state":
        w = widths or (64, 128, 256)
        states = _ladder_states(w)
        transitions = _fully_recurrent(states)
        default_t = t if t is not None else 5
        readout = states[-1].name
        if deep_prenet is None:
            deep_prenet = True
    elif name == "adjacent_3state":
        w = widths or (64, 128, 256)
        states = _ladder_states(w)
        transitions = _adjacent(states, include_self)
        default_t = t if t is not None else 5
        readout = states[-1].name
        if deep_prenet is None:
            deep_prenet = True
    elif name == "adjacent_4state":
        w = widths or (8, 16, 32, 64)
        states = _ladder_states(w)
        transitions = _adjacent(states, include_self)
        default_t = t if t is not None else 5
        readout = states[-1].name
        if deep_prenet is None:
            deep_prenet = True
    else:  # inhomogeneous_3state
        w = widths or (64, 128, 256)
        states = _ladder_states(w)
        transitions = _fully_recurrent(states)
        default_t = t if t is not None else 5
        readout = states[-1].name
        if deep_prenet is None:
            deep_prenet = True

    g = GraphSpec(
        states=states,
        transitions=transitions,
        pre_net="deep" if deep_prenet else pre_net,
        readout_state=readout,
        num_classes=num_classes,
    )
    io = IOSchedule(
        input_times=None if name == "inhomogeneous_3state" else frozenset({0}),
        readout_times=frozenset({default_t}),
    )
    diags = validate(g, sharing, io, max_t=max(default_t, 16))
    assert not diags, f"preset {name} invalid: {diags}"
    return Preset(g, sharing, io, default_t)
