import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapelab import simulator as sim
from shapelab.geometry import Direction, HalfSpace
from shapelab.reference import JumpEvent
from shapelab.simulator import (
    ContainmentBreach, FullSpace, HalfSpaceStart, LayerInit, NoOccupiedSite, Original, ProcessSpec, StartedAt,
    WorldState, build_initial_state, build_population, expected_event_count, guard_box, reset_types_at, run,
    run_event_log,
)

pytestmark = pytest.mark.filterwarnings("ignore::shapelab.simulator.ContainmentBreach")


def spec1(**kw):
    base = dict(d=1, mu_A=1.0, D=1.0, horizon=10.0, init_box_L=80, mode=FullSpace(), seed=7)
    base.update(kw)
    return ProcessSpec(**base)


# --- expected event count ------------------------------------------------

def test_expected_event_count_examples():
    assert expected_event_count(ProcessSpec(1, 2.0, 1.0, 5.0, 10)) == 210
    assert expected_event_count(ProcessSpec(1, 2.0, 3.7, 0.0, 10)) == 0
    assert expected_event_count(ProcessSpec(2, 1.0, 1.0, 7.0, 0)) == 7


def test_expected_event_count_matches_mc():
    spec = ProcessSpec(1, 2.0, 1.0, 5.0, 10)
    counts = [run(spec.replace(seed=s)).n_events for s in range(120)]
    # compound Poisson: variance of N jumps = E[n] D T + Var[n] (D T)^2 with n ~ Poisson(42)
    var = 42 * 2 * 5 + 42 * 25
    se = math.sqrt(var / len(counts))
    assert abs(np.mean(counts) - 210) < 3 * se


# --- initial states --------------------------------------------------------

def test_no_occupied_site():
    spec = ProcessSpec(2, 1.0, 1.0, 1.0, 3)
    with pytest.raises(NoOccupiedSite):
        build_initial_state(spec, counts={})


def test_designated_shell_then_lex():
    spec = ProcessSpec(2, 1.0, 1.0, 1.0, 3)
    _, designated = build_initial_state(spec, counts={(1, 0): 1, (0, -1): 1})
    assert designated == [(0, -1)]


def test_original_adds_b_at_origin():
    spec = ProcessSpec(2, 1.0, 1.0, 1.0, 5, mode=Original(), seed=3)
    state, designated = build_initial_state(spec)
    assert designated == [(0, 0)]
    pop = state.population
    assert pop.added.sum() == 1
    assert tuple(pop.origins[pop.added][0]) == (0, 0)
    res = run(spec, snapshot_times=[0.0])
    tl = res.layer
    assert np.sum((tl.theta == 0) & np.all(pop.origins == 0, axis=1)) >= 1


def test_halfspace_population_restricted():
    u = Direction.of((1, 1))
    spec = ProcessSpec(2, 1.0, 1.0, 1.0, 6, mode=HalfSpaceStart(u, 2.0), seed=1)
    pop = build_population(spec)
    assert np.all(pop.origins @ u.as_array() >= -2.0 - 1e-12)
    with pytest.raises(ValueError):
        HalfSpaceStart(u, -1.0)


def test_initial_counts_preserved():
    spec = ProcessSpec(2, 1.0, 1.0, 0.0, 6, seed=2)
    res = run(spec)
    sites, counts = np.unique(res.final.positions_array, axis=0, return_counts=True)
    field = sim.field_counts(spec, sites)
    assert counts.tolist() == field.tolist()


# --- hand traces -------------------------------------------------------------

def hand_setup():
    spec = ProcessSpec(1, 1.0, 1.0, 2.0, 3)
    pop = build_population(spec, counts={(0,): 1, (2,): 1})
    layer = LayerInit([0])
    events = [JumpEvent(0.5, 1, (2,), (1,)), JumpEvent(1.2, 1, (1,), (0,))]
    return spec, pop, layer, events


def test_hand_trace_theta():
    spec, pop, layer, events = hand_setup()
    res = run_event_log(spec, pop, events, [layer])
    assert res.layer.theta.tolist() == [0.0, 1.2]
    assert res.layer.b_tilde(2.0).tolist() == [[0]]
    assert res.layer.b_tilde(1.0).tolist() == [[0]]


def test_hand_trace_rejects_bad_events():
    spec, pop, layer, _ = hand_setup()
    with pytest.raises(ValueError):
        run_event_log(spec, pop, [JumpEvent(0.5, 1, (2,), (0,))], [layer])
    with pytest.raises(ValueError):
        run_event_log(spec, pop, [JumpEvent(0.5, 1, (1,), (0,))], [layer])


def test_coincidence_at_start():
    spec = ProcessSpec(1, 1.0, 1.0, 1.0, 2)
    pop = build_population(spec, counts={(0,): 2})
    res = run_event_log(spec, pop, [], [LayerInit([0])])
    assert res.layer.theta.tolist() == [0.0, 0.0]


def test_frozen_dynamics():
    spec = ProcessSpec(1, 1.0, 1.0, 0.0, 5, mode=Original(), seed=4)
    res = run(spec)
    assert res.layer.b_tilde(0.0).tolist() == [[0]]
    at0 = np.all(res.population.origins == 0, axis=1)
    assert np.all(np.isinf(res.layer.theta[~at0]))
    assert np.all(res.layer.theta[at0] == 0)


# --- resets ------------------------------------------------------------------

def reset_state():
    spec = ProcessSpec(2, 1.0, 1.0, 1.0, 4)
    pop = build_population(spec, counts={(0, 0): 2, (3, 3): 1})
    return WorldState(pop, pop.origins.copy(), 0.5), pop


def test_reset_picks_site_nearest_x():
    state, pop = reset_state()
    old = LayerInit([2])  # the (3,3) particle is B in the old layer
    new = reset_types_at(state, old, (0, 0))
    assert sorted(new.initial_B.tolist()) == [0, 1]
    assert 2 not in new.initial_B
    assert new.start == 0.5


def test_reset_at_occupied_site():
    state, _ = reset_state()
    new = reset_types_at(state, None, (3, 3))
    assert new.initial_B.tolist() == [2]


def test_reset_with_empty_restriction():
    state, _ = reset_state()
    with pytest.raises(NoOccupiedSite):
        reset_types_at(state, None, (0, 0), HalfSpace(Direction((1.0, 0.0)), 100.0))


def test_started_at_mode():
    spec = spec1(mode=StartedAt((0,), 4.0))
    res = run(spec)
    th = res.layer.theta
    assert np.all(th[np.isfinite(th)] >= 4.0)
    assert np.sum(th == 4.0) >= 1


# --- engine agreement and invariants ----------------------------------------

@pytest.mark.parametrize("d,L,T", [(1, 30, 10.0), (2, 8, 4.0)])
def test_fast_and_reference_agree(d, L, T):
    spec = ProcessSpec(d, 1.0, 1.0, T, L, seed=7)
    pop = build_population(spec)
    x0 = sim.designated_sites(spec, pop)
    l0 = sim.default_layer(pop, x0)
    half = LayerInit(l0.initial_B, start=T / 3)
    layers = [l0, half]
    a = run(spec, layers=layers, engine="fast", snapshot_times=[T / 2], population=pop)
    b = run(spec, layers=layers, engine="reference", snapshot_times=[T / 2], population=pop)
    assert a.n_events == b.n_events
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.theta, lb.theta)
        assert np.array_equal(la.visited_sites, lb.visited_sites)
        assert np.array_equal(la.visited_times, lb.visited_times)
    assert np.array_equal(a.snapshots[T / 2], b.snapshots[T / 2])


def test_snapshot_equals_replay():
    spec = ProcessSpec(2, 1.0, 1.0, 5.0, 10, seed=9)
    res = run(spec, snapshot_times=[2.5])
    snap = res.snapshots.pop(2.5)
    assert np.array_equal(res.positions_at(2.5), snap)


def test_grid_overflow_retry(monkeypatch):
    spec = ProcessSpec(1, 1.0, 1.0, 30.0, 20, seed=5)
    ref = run(spec)
    monkeypatch.setattr(sim, "_grid_radius", lambda *a, **k: 21)
    small = run(spec)
    assert np.array_equal(ref.layer.theta, small.layer.theta)
    assert np.array_equal(ref.layer.visited_sites, small.layer.visited_sites)


def test_determinism():
    spec = ProcessSpec(2, 1.0, 1.0, 6.0, 12, seed=21)
    a, b = run(spec), run(spec)
    assert np.array_equal(a.layer.theta, b.layer.theta)
    assert np.array_equal(a.final.positions_array, b.final.positions_array)


def test_guard_flag():
    spec = spec1(init_box_L=5)
    assert not spec.guard_ok
    with pytest.warns(ContainmentBreach):
        warnings.simplefilter("always")
        res = run(spec)
    assert not res.containment_ok
    ok = spec1(init_box_L=guard_box(10.0))
    assert run(ok).containment_ok


def test_event_invariants_and_single_type():
    """Each event moves one particle one step; no site ever holds both types."""
    bad = []

    def watch(ev, view):
        if sum(abs(a - b) for a, b in zip(ev.src, ev.dst)) != 1:
            bad.append(("step", ev))
        types = {view.theta(0, q) <= view.now for q in view.occupants(ev.dst)}
        if len(types) > 1:
            bad.append(("mixed", ev))

    for seed in range(100):
        spec = ProcessSpec(1, 1.0, 1.0, 5.0, 25, seed=seed)
        res = run(spec, listeners=[watch])
        n = len(res.final.positions_array)
        assert sum(len(v) for v in res.final.occupancy_ordinals.values()) == n
    assert not bad


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(1, 2), st.data())
def test_layer_monotonicity(seed, d, data):
    spec = ProcessSpec(d, 1.0, 1.0, 6.0, 6 if d == 2 else 20, seed=seed)
    pop = build_population(spec)
    n = len(pop)
    if n < 2:
        return
    small = data.draw(st.sets(st.integers(0, n - 1), min_size=1, max_size=3))
    extra = data.draw(st.sets(st.integers(0, n - 1), max_size=3))
    l1, l2 = LayerInit(sorted(small)), LayerInit(sorted(small | extra))
    res = run(spec, layers=[l1, l2], population=pop)
    assert np.all(res.layers[1].theta <= res.layers[0].theta)
    t = data.draw(st.floats(0, 6.0))
    s1 = {tuple(x) for x in res.layers[0].b_tilde(t).tolist()}
    s2 = {tuple(x) for x in res.layers[1].b_tilde(t).tolist()}
    assert s1 <= s2


def test_spec_validation_and_digest():
    with pytest.raises(ValueError):
        ProcessSpec(1, 0.0, 1.0, 1.0, 1)
    with pytest.raises(ValueError):
        ProcessSpec(1, 1.0, 0.0, 1.0, 1)
    a = spec1()
    assert a.digest() == spec1().digest() != spec1(seed=8).digest()
    assert sim.mode_from_dict(sim.mode_to_dict(HalfSpaceStart(Direction((1.0,)), 2.0))) == HalfSpaceStart(
        Direction((1.0,)), 2.0)
