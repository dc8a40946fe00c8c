"""Channel-size controllers: the dynamic search loop and two static baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from .errors import ConetError, InputError, TrainerError
from .lowrank import (PLATEAU_EPSILON, PLATEAU_WINDOW, UNDEFINED, LayerMetricsHistory,
                      plateau_epoch, rank_slope)
from .netgraph import ChannelAssignment, NetGraph, layer_groups, param_count

# rank-slope thresholds delta_0 .. delta_6
DELTA_PRESETS = (0.0025, 0.005, 0.0075, 0.01, 0.015, 0.02, 0.025)
STATIC_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)

EXPAND, HOLD, SHRINK = 1, 0, -1


def round_half_away(x: float) -> int:
    """Nearest integer, ties away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def delta_preset(name) -> float:
    """``3``, ``"3"``, ``"d3"`` or ``"delta3"`` -> the matching threshold."""
    key = str(name).lower().removeprefix("delta").removeprefix("d")
    try:
        return DELTA_PRESETS[int(key)]
    except (ValueError, IndexError):
        last = len(DELTA_PRESETS) - 1
        raise InputError(f"unknown delta preset {name!r}; use 0..{last}") from None


@dataclass(frozen=True)
class SearchConfig:
    delta: float = DELTA_PRESETS[3]
    mu: float = 50.0
    gamma: float = 0.05
    phi_init: float = 0.2
    epochs_per_trial: int = 20
    max_trials: int = 25
    min_channels: int = 1
    max_channels: int = 4096
    initial_channel_size: int = 32
    plateau_window: int = PLATEAU_WINDOW
    plateau_epsilon: float = PLATEAU_EPSILON
    max_params: int | None = None

    def __post_init__(self):
        problems = []
        if not self.delta > 0:
            problems.append("delta must be > 0")
        if not 0 < self.gamma < self.phi_init <= 1:
            problems.append("need 0 < gamma < phi_init <= 1")
        if self.epochs_per_trial < 2:
            problems.append("epochs_per_trial must be >= 2")
        if self.max_trials < 1:
            problems.append("max_trials must be >= 1")
        if self.min_channels < 1 or self.max_channels < self.min_channels:
            problems.append("need 1 <= min_channels <= max_channels")
        if not self.mu > 0:
            problems.append("mu must be > 0")
        if problems:
            raise InputError("invalid search config: " + "; ".join(problems))

    def clamp(self, size: int) -> int:
        return min(max(int(size), self.min_channels), self.max_channels)


@dataclass(frozen=True)
class LayerState:
    """Controller state of one channel variable."""

    size: int
    last_action: int = HOLD
    phi: float = 0.2
    frozen: bool = False
    old_size: int | None = None


def decide_action(slope: float, cond_avg: float, config: SearchConfig) -> int:
    """Expand unless the rank-slope is below delta or the condition exceeds mu."""
    if not math.isfinite(slope):
        raise InputError(f"rank slope must be finite, got {slope}")
    if slope < config.delta or cond_avg > config.mu:
        return SHRINK
    return EXPAND


def channel_factor(action: int, phi: float) -> float:
    """Unrounded size multiplier ``1 + action * phi``."""
    return 1.0 + action * phi


def update_channel(old_size: int, action: int, phi: float, config: SearchConfig) -> int:
    if action == HOLD:
        return int(old_size)
    return config.clamp(round_half_away(old_size * channel_factor(action, phi)))


def step_layer(state: LayerState, action: int, config: SearchConfig) -> LayerState:
    """Apply one decision: halve phi on a reversal, freeze once phi drops below gamma."""
    if state.frozen:
        raise ConetError("cannot step a frozen layer")
    phi = state.phi
    if action != state.last_action and state.last_action != HOLD:
        phi = phi / 2
    if phi < config.gamma:
        return replace(state, phi=phi, frozen=True, last_action=HOLD, old_size=state.size)
    return LayerState(size=update_channel(state.size, action, phi, config), last_action=action,
                      phi=phi, frozen=False, old_size=state.size)


# ---------------------------------------------------------------------------
# search loop
# ---------------------------------------------------------------------------

class Trainer(Protocol):
    def train(self, sizes: dict[str, int], n_epochs: int, trial: int):
        """Train a fresh model at ``sizes``; return an object with ``histories(layers)``."""


@dataclass
class TrialRecord:
    trial: int
    sizes: dict[str, int]
    slopes: dict[str, float]
    conditions: dict[str, float]
    actions: dict[str, int]
    phis: dict[str, float]
    frozen: dict[str, bool]
    new_sizes: dict[str, int]
    layer_slopes: dict[str, float] = field(default_factory=dict)
    layer_plateaus: dict[str, int] = field(default_factory=dict)
    histories: dict[str, LayerMetricsHistory] = field(default_factory=dict, repr=False)


@dataclass
class SearchResult:
    sizes: dict[str, int]
    trials: list[TrialRecord]

    @property
    def converged(self) -> bool:
        return bool(self.trials) and all(self.trials[-1].frozen.values())


def _group_signal(edges, slopes, conds):
    s = float(np.mean([slopes[e] for e in edges]))
    c = [conds[e] for e in edges]
    kappa = UNDEFINED if any(v == UNDEFINED for v in c) else float(np.mean(c))
    return s, kappa


def conet_search(graph: NetGraph, assignment: ChannelAssignment, trainer, config: SearchConfig,
                 initial_sizes: dict[str, int] | None = None, on_trial=None) -> SearchResult:
    """Alternate short training runs with per-variable shrink/expand decisions.

    Each trial trains a freshly initialised model, measures every conv edge,
    turns its average-rank history into a slope between epoch 0 and the
    plateau epoch, and averages slopes and final-epoch conditions over the
    conv edges that share a channel variable.  Variables are updated in
    assignment order.  The loop stops early once every variable is frozen.

    ``on_trial`` is called with each :class:`TrialRecord` as soon as it exists.
    """
    groups = layer_groups(graph, assignment)
    measured = [e.id for e in graph.conv_edges]
    if initial_sizes is None:
        initial_sizes = {v: config.initial_channel_size for v in assignment.variables}
    states = {v: LayerState(size=config.clamp(initial_sizes[v]), phi=config.phi_init)
              for v in assignment.variables}
    trials = []
    for trial in range(config.max_trials):
        sizes = {v: s.size for v, s in states.items()}
        try:
            result = trainer.train(dict(sizes), config.epochs_per_trial, trial)
            histories = result.histories(measured)
        except ConetError as exc:
            raise TrainerError(f"trial {trial}: {exc}", trial=trial) from exc
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            raise TrainerError(f"trial {trial}: trainer failed: {exc}", trial=trial) from exc

        layer_slopes, plateaus, conds = {}, {}, {}
        for name, hist in histories.items():
            t2 = plateau_epoch(hist, config.plateau_window, config.plateau_epsilon)
            plateaus[name] = t2
            layer_slopes[name] = rank_slope(hist, 0, t2)
            conds[name] = hist[len(hist) - 1].cond_avg

        slopes, kappas, actions = {}, {}, {}
        for v in assignment.variables:
            state = states[v]
            slopes[v], kappas[v] = _group_signal(groups[v], layer_slopes, conds)
            if state.frozen:
                actions[v] = HOLD
                continue
            action = decide_action(slopes[v], kappas[v], config)
            if action == EXPAND and config.max_params is not None:
                trial_sizes = {u: s.size for u, s in states.items()}
                trial_sizes[v] = update_channel(state.size, EXPAND, state.phi, config)
                if param_count(graph, trial_sizes, assignment) > config.max_params:
                    actions[v] = HOLD
                    continue
            states[v] = step_layer(state, action, config)
            actions[v] = action if not states[v].frozen else HOLD
        record = TrialRecord(
            trial=trial, sizes=sizes, slopes=slopes, conditions=kappas, actions=actions,
            phis={v: s.phi for v, s in states.items()},
            frozen={v: s.frozen for v, s in states.items()},
            new_sizes={v: s.size for v, s in states.items()},
            layer_slopes=layer_slopes, layer_plateaus=plateaus, histories=histories)
        trials.append(record)
        if on_trial is not None:
            on_trial(record)
        if all(s.frozen for s in states.values()):
            break
    return SearchResult({v: s.size for v, s in states.items()}, trials)


# ---------------------------------------------------------------------------
# static baselines
# ---------------------------------------------------------------------------

def static_scale(base_size: int, max_output_rank: float, scale_fraction: float) -> int:
    """Shrink a baseline size toward ``rank * size`` by ``scale_fraction`` of the gap."""
    if not 0.0 <= max_output_rank <= 1.0:
        raise InputError(f"max output rank must lie in [0, 1], got {max_output_rank}")
    if not 0.0 <= scale_fraction <= 1.0:
        raise InputError(f"scale fraction must lie in [0, 1], got {scale_fraction}")
    o = max_output_rank
    return max(1, round_half_away(base_size * (o + (1 - scale_fraction) * (1 - o))))


def static_scale_network(graph: NetGraph, assignment: ChannelAssignment,
                         baseline: dict[str, int], max_output_ranks: dict[str, float],
                         scale_fraction: float) -> dict[str, int]:
    """Scale each variable by the mean max output rank of the conv edges feeding it."""
    out = {}
    for v, edges in layer_groups(graph, assignment).items():
        missing = [e for e in edges if e not in max_output_ranks]
        if missing:
            raise InputError(f"no baseline output rank for conv edges {missing}")
        o = float(np.mean([max_output_ranks[e] for e in edges]))
        out[v] = static_scale(baseline[v], o, scale_fraction)
    return out


def compound_scale(sizes: dict[str, int], multiplier: float) -> dict[str, int]:
    """Width-only compound scaling: every channel variable times ``multiplier``."""
    if not multiplier > 0:
        raise InputError(f"multiplier must be > 0, got {multiplier}")
    return {v: max(1, round_half_away(s * multiplier)) for v, s in sizes.items()}
