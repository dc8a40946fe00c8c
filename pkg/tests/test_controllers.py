from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conet.controllers import (DELTA_PRESETS, EXPAND, HOLD, SHRINK, LayerState, SearchConfig,
                               compound_scale, conet_search, decide_action, delta_preset,
                               round_half_away, static_scale, static_scale_network, step_layer,
                               update_channel)
from conet.errors import InputError, TrainerError
from conet.lowrank import UNDEFINED, LayerMetrics, LayerMetricsHistory
from conet.netgraph import (Edge, NetGraph, Node, assign_unique_channels, param_count,
                            uniform_sizes, validate_assignment)

CFG = SearchConfig()


def chain(n_convs=3):
    nodes = [Node(f"n{i}") for i in range(n_convs + 1)]
    edges = [Edge(f"c{i}", f"n{i}", f"n{i + 1}", "conv", (3, 3)) for i in range(n_convs)]
    return NetGraph(nodes, edges)


def linear_history(slope, n_epochs, cond=2.0, start=0.1):
    return LayerMetricsHistory(tuple(
        LayerMetrics(start + slope * t, start + slope * t, start + slope * t, cond, cond, cond)
        for t in range(n_epochs)))


class ScriptedTrainer:
    """Emits linear rank histories whose slope is ``script(trial, layer)``."""

    def __init__(self, script, cond=2.0):
        self.script = script
        self.cond = cond
        self.calls = []

    def train(self, sizes, n_epochs, trial):
        self.calls.append((trial, dict(sizes)))
        outer = self

        class Result:
            def histories(self, layers):
                return {name: linear_history(outer.script(trial, name), n_epochs, outer.cond)
                        for name in layers}

        return Result()


# --- single decisions ------------------------------------------------------------------

def test_decide_action_examples():
    assert decide_action(0.02, 5, CFG) == EXPAND
    assert decide_action(0.001, 5, CFG) == SHRINK
    assert decide_action(0.02, UNDEFINED, CFG) == SHRINK
    assert decide_action(CFG.delta, CFG.mu, CFG) == EXPAND
    assert decide_action(0.02, 51, CFG) == SHRINK
    with pytest.raises(InputError):
        decide_action(math.nan, 5, CFG)


def test_update_channel_examples():
    assert update_channel(100, EXPAND, 0.2, CFG) == 120
    assert update_channel(100, SHRINK, 0.2, CFG) == 80
    for phi in (0.01, 0.5, 1.0):
        assert update_channel(32, HOLD, phi, CFG) == 32


def test_update_channel_rounds_half_away_and_clamps():
    assert round_half_away(2.5) == 3 and round_half_away(-2.5) == -3 and round_half_away(2.4) == 2
    assert update_channel(5, EXPAND, 0.1, CFG) == 6  # 5.5 rounds up
    assert update_channel(1, SHRINK, 0.5, CFG) == 1
    tight = SearchConfig(max_channels=100)
    assert update_channel(95, EXPAND, 0.2, tight) == 100


@given(st.floats(1, 10_000), st.floats(0.001, 1.0))
@settings(max_examples=200)
def test_unrounded_expand_then_shrink(old, phi):
    assert old * (1 + phi) * (1 - phi) == pytest.approx(old * (1 - phi**2), rel=1e-12)


def test_step_layer_examples():
    s = step_layer(LayerState(100, EXPAND, 0.2), SHRINK, CFG)
    assert (s.phi, s.size, s.last_action, s.frozen) == (0.1, 90, SHRINK, False)
    s = step_layer(LayerState(100, SHRINK, 0.1), SHRINK, CFG)
    assert (s.phi, s.size) == (0.1, 90)
    # the first decision never halves
    s = step_layer(LayerState(100, HOLD, 0.2), SHRINK, CFG)
    assert (s.phi, s.size) == (0.2, 80)


def test_alternating_actions_freeze_on_third_flip():
    state = LayerState(64, HOLD, 0.2)
    flips = 0
    for k in range(10):
        action = EXPAND if k % 2 == 0 else SHRINK
        if state.last_action not in (HOLD, action):
            flips += 1
        state = step_layer(state, action, CFG)
        if state.frozen:
            break
    assert flips == 1 + math.ceil(math.log2(CFG.phi_init / CFG.gamma)) == 3
    assert state.last_action == HOLD and state.phi < CFG.gamma


def test_frozen_layer_cannot_step():
    with pytest.raises(Exception):
        step_layer(LayerState(8, HOLD, 0.01, frozen=True), EXPAND, CFG)


def test_search_config_validation():
    for bad in (dict(delta=0), dict(gamma=0.3), dict(epochs_per_trial=1),
                dict(min_channels=0), dict(min_channels=10, max_channels=5)):
        with pytest.raises(InputError):
            SearchConfig(**bad)


def test_delta_presets():
    assert DELTA_PRESETS[0] == 0.0025 and delta_preset("d3") == 0.01 == delta_preset(3)
    with pytest.raises(InputError):
        delta_preset("d9")


# --- the search loop with a scripted trainer -----------------------------------------

def test_alternating_slopes_converge():
    g = chain(3)
    a = assign_unique_channels(g)
    trainer = ScriptedTrainer(lambda t, _: 0.02 if t % 2 == 0 else 0.001)
    cfg = SearchConfig(max_trials=25, epochs_per_trial=5)
    res = conet_search(g, a, trainer, cfg)
    assert res.converged
    # expand, then three flips; the third flip freezes
    assert len(res.trials) == 4
    assert [rec.phis["n1"] for rec in res.trials] == [0.2, 0.1, 0.05, 0.025]
    assert [rec.new_sizes["n1"] for rec in res.trials] == [38, 34, 36, 36]
    assert res.sizes == {"n1": 36, "n2": 36, "n3": 36}


def test_constant_ranks_shrink_to_min_channels():
    g = chain(2)
    a = assign_unique_channels(g)
    cfg = SearchConfig(max_trials=25, epochs_per_trial=4, min_channels=4)
    res = conet_search(g, a, ScriptedTrainer(lambda t, _: 0.0), cfg)
    seq = [rec.new_sizes["n1"] for rec in res.trials]
    assert all(x >= y for x, y in zip(seq, seq[1:]))
    assert seq[-1] == 4 and res.sizes == {"n1": 4, "n2": 4}
    assert len(res.trials) == 25 and not res.converged


def test_undefined_condition_forces_shrink():
    g = chain(1)
    a = assign_unique_channels(g)
    cfg = SearchConfig(max_trials=1, epochs_per_trial=3)
    res = conet_search(g, a, ScriptedTrainer(lambda t, _: 0.5, cond=UNDEFINED), cfg)
    assert res.trials[0].actions == {"n1": SHRINK}


@given(st.lists(st.floats(0, 0.05), min_size=25, max_size=25), st.integers(4, 64))
@settings(max_examples=40, deadline=None)
def test_search_invariants(slopes, start):
    g = chain(2)
    a = assign_unique_channels(g)
    cfg = SearchConfig(max_trials=25, epochs_per_trial=3, min_channels=2, max_channels=80,
                       initial_channel_size=start)
    res = conet_search(g, a, ScriptedTrainer(lambda t, name: slopes[t]), cfg)
    assert len(res.trials) <= cfg.max_trials
    for v in a.variables:
        phis = [rec.phis[v] for rec in res.trials]
        assert all(x >= y for x, y in zip(phis, phis[1:]))
        frozen_at = next((i for i, rec in enumerate(res.trials) if rec.frozen[v]), None)
        if frozen_at is not None:
            after = [rec.new_sizes[v] for rec in res.trials[frozen_at:]]
            assert len(set(after)) == 1
            assert res.trials[frozen_at].phis[v] < cfg.gamma
    for rec in res.trials:
        assert all(2 <= s <= 80 for s in rec.new_sizes.values())
        assert validate_assignment(g, a, rec.new_sizes) == []


def test_search_is_deterministic():
    g = chain(3)
    a = assign_unique_channels(g)
    script = lambda t, name: 0.003 * ((t * 7 + len(name)) % 5)  # noqa: E731
    cfg = SearchConfig(max_trials=12, epochs_per_trial=3)
    r1 = conet_search(g, a, ScriptedTrainer(script), cfg)
    r2 = conet_search(g, a, ScriptedTrainer(script), cfg)
    assert r1 == r2


def test_trainer_failure_reports_the_trial():
    g = chain(1)
    a = assign_unique_channels(g)

    class Failing(ScriptedTrainer):
        def train(self, sizes, n_epochs, trial):
            if trial == 2:
                raise FloatingPointError("loss diverged")
            return super().train(sizes, n_epochs, trial)

    with pytest.raises(TrainerError) as info:
        conet_search(g, a, Failing(lambda t, _: 0.02), SearchConfig(epochs_per_trial=3))
    assert info.value.trial == 2 and "loss diverged" in str(info.value)


def test_param_budget_blocks_expansion():
    g = chain(2)
    a = assign_unique_channels(g)
    budget = param_count(g, uniform_sizes(a, 40), a)
    cfg = SearchConfig(max_trials=10, epochs_per_trial=3, max_params=budget)
    res = conet_search(g, a, ScriptedTrainer(lambda t, _: 0.05), cfg)
    for rec in res.trials:
        assert param_count(g, rec.new_sizes, a) <= budget
    assert HOLD in res.trials[-1].actions.values()


def test_group_mean_is_used_for_shared_variables():
    # stem and c2 share one variable; their slopes are averaged
    g = NetGraph([Node("a"), Node("b"), Node("m"), Node("s", "summation")],
                 [Edge("stem", "a", "b", "conv"), Edge("c1", "b", "m", "conv"),
                  Edge("c2", "m", "s", "conv"), Edge("skip", "b", "s", "skip")])
    a = assign_unique_channels(g)
    script = {"stem": 0.0, "c1": 0.02, "c2": 0.03}
    res = conet_search(g, a, ScriptedTrainer(lambda t, n: script[n]),
                       SearchConfig(max_trials=1, epochs_per_trial=3))
    rec = res.trials[0]
    assert rec.slopes["b"] == pytest.approx(0.015) and rec.actions["b"] == EXPAND
    assert rec.slopes["m"] == pytest.approx(0.02)


# --- static and compound baselines -----------------------------------------------------

def test_static_scale_examples():
    assert static_scale(64, 0.5, 1.0) == 32
    assert static_scale(64, 0.5, 0.0) == 64
    assert static_scale(100, 0.3, 0.4) == 72
    assert static_scale(3, 0.0, 1.0) == 1
    for bad in ((64, 1.2, 0.5), (64, 0.5, -0.1)):
        with pytest.raises(InputError):
            static_scale(*bad)


@given(st.integers(1, 2048), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_static_scale_monotone_in_fraction(c, o, f1, f2):
    lo, hi = sorted((f1, f2))
    assert static_scale(c, o, hi) <= static_scale(c, o, lo)


def test_static_scale_network_averages_groups():
    g = NetGraph([Node("a"), Node("b"), Node("m"), Node("s", "summation")],
                 [Edge("stem", "a", "b", "conv"), Edge("c1", "b", "m", "conv"),
                  Edge("c2", "m", "s", "conv"), Edge("skip", "b", "s", "skip")])
    a = assign_unique_channels(g)
    ranks = {"stem": 0.4, "c2": 0.6, "c1": 1.0}
    out = static_scale_network(g, a, {"b": 64, "m": 64}, ranks, 1.0)
    assert out == {"b": 32, "m": 64}
    assert static_scale_network(g, a, {"b": 64, "m": 20}, ranks, 0.0) == {"b": 64, "m": 20}
    with pytest.raises(InputError):
        static_scale_network(g, a, {"b": 64, "m": 64}, {"stem": 0.5}, 0.4)


def test_compound_scale_examples():
    sizes = {"a": 16, "b": 32, "c": 64}
    assert compound_scale(sizes, math.sqrt(2)) == {"a": 23, "b": 45, "c": 91}
    assert compound_scale(sizes, 1.0) == sizes
    with pytest.raises(InputError):
        compound_scale(sizes, 0)


def test_compound_doubling_quadruples_inner_params():
    g = chain(4)
    a = assign_unique_channels(g)
    s = {v: int(x) for v, x in zip(a.variables, np.random.default_rng(0).integers(4, 40, 4))}
    d = compound_scale(s, 2.0)
    inner = lambda sz: param_count(g, sz, a) - 27 * sz["n1"] - 10 * sz["n4"] - 10  # noqa: E731
    assert inner(d) == 4 * inner(s)
