import numpy as np
import pytest

from portirl.forecast import (
    ForecastConfig,
    MajorityActionBaseline,
    RolloutError,
    action_accuracy,
    decide_joint,
    event_accuracy,
    evaluate,
    predict_congestion,
    predict_departures,
    ratio,
    rollout,
)
from portirl.irl import IRLConfig, fit_factored
from portirl.model import (
    ArrivalEvent,
    JointAction,
    PortState,
    SlotAction,
    is_congested,
    validate_joint_action,
)
from portirl.pipeline import (
    FeatureScales,
    build_factored_samples,
    discretize,
    legal_wire_indices,
    segment_feature_matrix,
    split_windows,
)
from portirl.synth import generate_dataset, write_registry_csv, write_visits_csv


def make_state(berth=(), waiting=(), incoming=(), window=0):
    slots = [0] * 19
    for i, imo in enumerate(berth):
        slots[i] = imo
    for i, imo in enumerate(waiting):
        slots[6 + i] = imo
    for i, imo in enumerate(incoming):
        slots[13 + i] = imo
    return PortState(slots=tuple(slots), window=window)


class ScriptedPolicy:
    """Stateless policy with hand-set per-slot action weights."""

    def __init__(self, table=None):
        self.table = table or {}

    def begin(self):
        return None

    def step(self, state, carry):
        dists = []
        for i in range(state.layout.n_slots):
            legal = legal_wire_indices(state, i)
            weights = np.array(
                [self.table.get(i, {}).get(k, 1.0) for k in legal], dtype=float
            )
            dists.append((legal, weights / weights.sum()))
        return dists, carry


def hand_dists(state, overrides):
    """Uniform per-slot distributions with explicit probability overrides."""
    dists = []
    for i in range(state.layout.n_slots):
        legal = legal_wire_indices(state, i)
        if i in overrides:
            probs = np.array([overrides[i].get(k, 0.0) for k in legal])
            rest = [k for k in legal if k not in overrides[i]]
            leftover = (1.0 - probs.sum()) / len(rest) if rest else 0.0
            probs = np.array(
                [overrides[i].get(k, leftover) for k in legal]
            )
        else:
            probs = np.full(len(legal), 1.0 / len(legal))
        dists.append((legal, probs))
    return dists


# ---------------------------------------------------------------------------
# joint decision resolution
# ---------------------------------------------------------------------------


def test_uncontested_picks_pass_through():
    st = make_state(berth=[101], waiting=[201])
    dists = hand_dists(st, {0: {10: 0.9}, 6: {5: 0.8}})
    ja = decide_joint(st, dists)
    assert ja.actions[0] is SlotAction.LEAVE_SYSTEM
    assert ja.actions[6] is SlotAction.GO_TO_BERTH_2
    assert validate_joint_action(st, ja).valid


def test_contested_berth_goes_to_higher_probability():
    st = make_state(waiting=[201, 202])
    # both want berth 1; slot 7 is more confident and wins it
    dists = hand_dists(st, {6: {4: 0.6, 5: 0.3}, 7: {4: 0.9}})
    ja = decide_joint(st, dists)
    assert ja.actions[7] is SlotAction.GO_TO_BERTH_1
    assert ja.actions[6] is SlotAction.GO_TO_BERTH_2  # loser's next best
    assert validate_joint_action(st, ja).valid


def test_contested_berth_tie_breaks_to_lower_slot():
    st = make_state(waiting=[201, 202])
    dists = hand_dists(st, {6: {4: 0.5, 5: 0.4}, 7: {4: 0.5, 5: 0.4}})
    ja = decide_joint(st, dists)
    assert ja.actions[6] is SlotAction.GO_TO_BERTH_1
    assert ja.actions[7] is SlotAction.GO_TO_BERTH_2


def test_waiting_capacity_bumps_least_confident_entrant():
    # five berths occupied and staying, one free; six waiting vessels stay;
    # two incoming entrants cannot both fit the queue
    st = make_state(
        berth=[1, 2, 3, 4, 5],
        waiting=[6, 7, 8, 9, 10, 11],
        incoming=[12, 13],
    )
    overrides = {b: {2: 0.99} for b in range(5)}
    overrides.update({w: {2: 0.99} for w in range(6, 12)})
    overrides[13] = {3: 0.9}
    overrides[14] = {3: 0.6}
    ja = decide_joint(st, hand_dists(st, overrides))
    assert ja.actions[13] is SlotAction.GO_TO_WAITING
    assert ja.actions[14] is SlotAction.GO_TO_BERTH_6  # bumped to the free berth
    assert validate_joint_action(st, ja).valid


def test_wedged_entrant_raises():
    # full berths and a full queue leave a second entrant nowhere to go
    st = make_state(
        berth=[1, 2, 3, 4, 5, 6],
        waiting=[7, 8, 9, 10, 11, 12],
        incoming=[13, 14],
    )
    overrides = {b: {2: 0.99} for b in range(6)}
    overrides.update({w: {2: 0.99} for w in range(6, 12)})
    with pytest.raises(RolloutError, match="no legal action left"):
        decide_joint(st, hand_dists(st, overrides))


def test_sampled_decisions_follow_seeded_rng():
    st = make_state(waiting=[201])
    dists = hand_dists(st, {6: {2: 0.5, 4: 0.5}})
    rng_a = np.random.default_rng(12)
    rng_b = np.random.default_rng(12)
    a = decide_joint(st, dists, rule="sample", rng=rng_a)
    b = decide_joint(st, hand_dists(st, {6: {2: 0.5, 4: 0.5}}), "sample", rng_b)
    assert a == b


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


def test_empty_port_stays_empty():
    policy = ScriptedPolicy()
    states, actions = rollout(policy, PortState.empty(), None, 5)
    assert len(states) == 6
    for st in states:
        assert st.vessels() == set()
    for ja in actions:
        assert all(a is SlotAction.NOTHING for a in ja.actions)


def test_argmax_rollout_is_deterministic():
    policy = ScriptedPolicy()
    start = make_state(berth=[101], waiting=[201, 202], incoming=[301])
    a = rollout(policy, start, None, 8)
    b = rollout(policy, start, None, 8)
    assert a == b


def test_rollout_windows_advance():
    policy = ScriptedPolicy()
    start = make_state(waiting=[201], window=40)
    states, _ = rollout(policy, start, None, 3)
    assert [st.window for st in states] == [40, 41, 42, 43]


def test_rollout_admits_arrivals_up_to_headroom():
    # waiting vessels spread over distinct berths so the queue keeps draining
    policy = ScriptedPolicy({6 + j: {4 + j: 100.0} for j in range(6)})
    events = [ArrivalEvent(imo=500 + k, window=1) for k in range(8)]

    def arrivals_fn(w):
        return [ev for ev in events if ev.window == w]

    states, _ = rollout(policy, PortState.empty(), None, 6, arrivals_fn)
    # six fit the incoming zone immediately, the rest follow as space frees
    assert len(states[1].vessels()) == 6
    seen = set()
    for st in states:
        seen |= st.vessels()
    assert seen == {500 + k for k in range(8)}


def test_rollout_defers_vessels_already_in_port():
    policy = ScriptedPolicy({0: {2: 100.0}})  # berth occupant keeps staying
    start = make_state(berth=[101])

    def arrivals_fn(w):
        return [ArrivalEvent(imo=101, window=w)] if w == 1 else []

    states, _ = rollout(policy, start, None, 5, arrivals_fn)
    for st in states:
        assert st.vessels() == {101}
        assert st.slots[0] == 101  # never re-admitted while inside


# ---------------------------------------------------------------------------
# accuracy metrics
# ---------------------------------------------------------------------------


def test_ratio_of_nothing_is_undefined():
    assert ratio(0, 0) is None
    assert ratio(3, 4) == 0.75


def test_action_accuracy_three_of_four():
    true = [SlotAction.STAY, SlotAction.LEAVE_SYSTEM, SlotAction.STAY, SlotAction.GO_TO_WAITING]
    pred = [SlotAction.STAY, SlotAction.LEAVE_SYSTEM, SlotAction.STAY, SlotAction.STAY]
    assert action_accuracy(pred, true) == 0.75


def test_action_accuracy_skips_idle_true_positions():
    true = [SlotAction.NOTHING, SlotAction.STAY, SlotAction.NOTHING]
    pred = [SlotAction.STAY, SlotAction.STAY, SlotAction.NOTHING]
    assert action_accuracy(pred, true) == 1.0
    assert action_accuracy(pred, true, include_nothing=True) == pytest.approx(2 / 3)


def test_action_accuracy_handles_joint_actions():
    st = make_state(berth=[101])
    truth = JointAction(
        actions=tuple(
            SlotAction.STAY if i == 0 else SlotAction.NOTHING for i in range(19)
        )
    )
    pred = JointAction(
        actions=tuple(
            SlotAction.LEAVE_SYSTEM if i == 0 else SlotAction.NOTHING
            for i in range(19)
        )
    )
    assert action_accuracy([pred], [truth]) == 0.0
    assert action_accuracy([truth], [truth]) == 1.0


def test_action_accuracy_empty_denominator_is_none():
    idle = [SlotAction.NOTHING, SlotAction.NOTHING]
    assert action_accuracy(idle, idle) is None


def test_action_accuracy_length_mismatch_raises():
    with pytest.raises(ValueError, match="length mismatch"):
        action_accuracy([SlotAction.STAY], [SlotAction.STAY, SlotAction.STAY])


def test_event_accuracy_on_flags_and_windows():
    assert event_accuracy([True, False, True], [True, True, True]) == pytest.approx(2 / 3)
    assert event_accuracy([7, None, 9], [7, 8, 9]) == pytest.approx(2 / 3)
    assert event_accuracy([], []) is None
    with pytest.raises(ValueError):
        event_accuracy([True], [])


# ---------------------------------------------------------------------------
# congestion and departure forecasts
# ---------------------------------------------------------------------------


def test_forecast_config_validation():
    with pytest.raises(ValueError):
        ForecastConfig(horizon=0)
    with pytest.raises(ValueError):
        ForecastConfig(rule="greedy")


def test_empty_port_is_not_congested_next_window():
    assert predict_congestion(ScriptedPolicy(), PortState.empty()) is False


def test_incoming_entrant_tips_congestion():
    # two waiting stay and one incoming joins: three vessels trip the flag
    policy = ScriptedPolicy()
    st = make_state(waiting=[201, 202], incoming=[301])
    assert predict_congestion(policy, st) is True
    assert predict_congestion(policy, make_state(waiting=[201, 202])) is False


def test_heavy_queue_stays_congested():
    policy = ScriptedPolicy({w: {2: 1.0} for w in range(6, 11)})
    st = make_state(waiting=[1, 2, 3, 4, 5])
    assert predict_congestion(policy, st) is True


def test_congestion_forecast_equals_one_step_rollout():
    policy = ScriptedPolicy()
    cases = [
        make_state(waiting=[201, 202], incoming=[301]),
        make_state(berth=[101, 102], waiting=[201]),
        make_state(incoming=[301, 302]),
        PortState.empty(),
    ]
    events = [ArrivalEvent(imo=900, window=1)]
    for st in cases:
        direct = predict_congestion(policy, st, events)
        states, _ = rollout(
            policy,
            st,
            None,
            1,
            arrivals_fn=lambda w: [ev for ev in events if ev.window == w],
        )
        assert direct == is_congested(states[1])


def test_departure_forecast_reports_leave_window():
    policy = ScriptedPolicy({0: {10: 100.0}})  # berth vessel leaves at once
    st = make_state(berth=[101], waiting=[201], window=30)
    out = predict_departures(policy, st)
    assert out[101] == 30
    assert out[201] is None  # still queued within the one-window horizon


def test_departure_forecast_resolves_with_longer_horizon():
    policy = ScriptedPolicy()
    st = make_state(waiting=[201], window=10)
    short = predict_departures(policy, st, config=ForecastConfig(horizon=1))
    # uniform weights walk the vessel to a berth and eventually out
    longer = predict_departures(policy, st, config=ForecastConfig(horizon=40))
    assert short[201] is None
    assert longer[201] is None or longer[201] >= 10


def test_departures_cover_exactly_the_present_vessels():
    policy = ScriptedPolicy()
    st = make_state(berth=[101, 102], waiting=[201], incoming=[301])
    out = predict_departures(policy, st, config=ForecastConfig(horizon=5))
    assert sorted(out) == [101, 102, 201, 301]


# ---------------------------------------------------------------------------
# baseline and evaluation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    res = generate_dataset(n_windows=100, seed=19)
    write_visits_csv(root / "visits.csv", res.visits)
    write_registry_csv(root / "registry.csv", res.registry)
    from portirl.pipeline import load_registry, load_visits

    visits = load_visits(root / "visits.csv")
    registry = load_registry(root / "registry.csv")
    segments = discretize(visits, registry)
    train_refs, test_refs = split_windows(segments)
    return registry, segments, train_refs, test_refs


def test_majority_baseline_predicts_stay(small_chain):
    registry, segments, train_refs, test_refs = small_chain
    baseline = MajorityActionBaseline(segments, train_refs)
    assert baseline.majority is SlotAction.STAY
    st = segments[0].states[1]
    pred = baseline.predict(st)
    for i, imo in enumerate(st.slots):
        expected = SlotAction.STAY if imo != 0 else SlotAction.NOTHING
        assert pred[i] is expected


def test_majority_baseline_on_no_data_defaults_to_stay():
    baseline = MajorityActionBaseline([], [])
    assert baseline.majority is SlotAction.STAY


def test_evaluate_reports_populated_metrics(small_chain):
    registry, segments, train_refs, test_refs = small_chain
    scales = FeatureScales.from_data(registry, segments, refs=train_refs)
    mats = [segment_feature_matrix(seg, registry, scales) for seg in segments]
    samples = build_factored_samples(segments, mats, None, train_refs)
    cfg = IRLConfig(mode="factored", fit_iterations=40)
    fit = fit_factored(samples, cfg)

    from portirl.forecast import LearnedPolicy

    policy = LearnedPolicy(fit.model(), registry, scales)
    report, plots = evaluate(
        policy, segments, test_refs, train_refs, departure_horizon=30
    )
    assert report.n_action_slots > 0
    assert report.n_congestion_windows == len(test_refs)
    assert 0.0 <= report.action_accuracy <= 1.0
    assert 0.0 <= report.congestion_accuracy <= 1.0
    assert 0.0 <= report.baseline_action_accuracy <= 1.0
    payload = report.to_json()
    assert payload["counts"]["action_slots"] == report.n_action_slots
    assert set(plots) == {"congestion", "departures"}
