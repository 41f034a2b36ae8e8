"""Turning a learned reward into operational predictions.

A policy proposes per-slot action distributions window by window, carrying
its recurrent context along. A joint decision is formed by resolving berth
and queue conflicts in favor of the more confident slot; the losers pick
again from what remains. On top of that sit the three forecasts: next
window's joint action (teacher-forced), one-step congestion, and each
vessel's departure window via rollout. Majority-vote baselines computed on
the training split calibrate every reported accuracy.
"""

from __future__ import annotations

import csv
import json
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .irl import slot_action_distribution
from .lstm_ae import step_features
from .model import (
    ArrivalEvent,
    JointAction,
    PortState,
    SlotAction,
    Zone,
    apply_transition,
    incoming_count,
    is_congested,
    waiting_count,
)
from .pipeline import Segment, WindowRef, legal_wire_indices, state_features


class RolloutError(RuntimeError):
    """A simulated schedule reached a position no legal action resolves."""


@dataclass
class SlotDecision:
    """One slot's restricted choice set and current distribution over it."""

    slot: int
    legal: list[int]
    probs: np.ndarray
    pick: int = 0
    pick_prob: float = 1.0


class LearnedPolicy:
    """Factored reward plus (optionally) the recurrent feature extractor."""

    def __init__(self, reward_model, registry, scales, ae_params=None, ae_config=None):
        self.reward_model = reward_model
        self.registry = registry
        self.scales = scales
        self.ae_params = ae_params
        self.ae_config = ae_config

    def begin(self):
        if self.ae_params is None:
            return None
        h = np.zeros(self.ae_config.hidden_dim)
        c = np.zeros(self.ae_config.hidden_dim)
        return (h, c)

    def step(self, state: PortState, carry):
        """Per-slot distributions for one window, plus the advanced carry."""
        x = state_features(state, self.registry, self.scales)
        if self.ae_params is None:
            z = np.zeros(0)
        else:
            z, h, c = step_features(
                self.ae_params, x, carry[0], carry[1], self.ae_config
            )
            carry = (h, c)
        dists = []
        for i in range(state.layout.n_slots):
            legal = legal_wire_indices(state, i)
            probs = slot_action_distribution(self.reward_model, x, z, legal)
            dists.append((legal, probs))
        return dists, carry


class MajorityActionBaseline:
    """Majority-class label predictor fitted on the training windows.

    Every occupied slot gets the single most frequent training sub-action,
    legality ignored; empty slots predict the idle action. This is a label
    guesser, not a playable schedule.
    """

    def __init__(self, segments: list[Segment], refs: list[WindowRef]):
        counts: Counter = Counter()
        for ref in refs:
            seg = segments[ref.segment]
            state = seg.states[ref.t]
            for i, act in enumerate(seg.actions[ref.t].actions):
                if state.slots[i] != 0:
                    counts[act] += 1
        self.majority = (
            counts.most_common(1)[0][0] if counts else SlotAction.STAY
        )

    def predict(self, state: PortState) -> tuple[SlotAction, ...]:
        return tuple(
            self.majority if imo != 0 else SlotAction.NOTHING
            for imo in state.slots
        )


def _pick(decision: SlotDecision, rule: str, rng) -> None:
    if rule == "argmax":
        idx = int(np.argmax(decision.probs))
    elif rule == "sample":
        idx = int(rng.choice(len(decision.probs), p=decision.probs))
    else:
        raise ValueError(f"unknown decision rule {rule!r}")
    decision.pick = decision.legal[idx]
    decision.pick_prob = float(decision.probs[idx])


def _restrict(decision: SlotDecision, banned: int) -> None:
    keep = [j for j, k in enumerate(decision.legal) if k != banned]
    if not keep:
        raise RolloutError(
            f"slot {decision.slot} has no legal action left after conflicts"
        )
    decision.legal = [decision.legal[j] for j in keep]
    probs = decision.probs[keep]
    total = probs.sum()
    decision.probs = (
        probs / total if total > 0 else np.full(len(keep), 1.0 / len(keep))
    )


def decide_joint(
    state: PortState, dists, rule: str = "argmax", rng=None
) -> JointAction:
    """Resolve per-slot picks into one valid joint action.

    Contested berths go to the claimant with the higher pick probability
    (ties to the lower slot); losers re-decide over their remaining actions.
    The waiting queue is kept within capacity the same way, bumping the least
    confident entrant first.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    lay = state.layout
    decisions = []
    for i in range(lay.n_slots):
        legal, probs = dists[i]
        d = SlotDecision(slot=i, legal=list(legal), probs=np.asarray(probs, float).copy())
        _pick(d, rule, rng)
        decisions.append(d)

    while True:
        # contested berths: best claim wins, the rest choose again
        claims: dict[int, list[SlotDecision]] = {}
        for d in decisions:
            act = SlotAction(d.pick)
            if act.berth_target is not None:
                claims.setdefault(act.berth_target, []).append(d)
        conflict = False
        for berth, claimants in claims.items():
            if len(claimants) <= 1:
                continue
            conflict = True
            claimants.sort(key=lambda d: (-d.pick_prob, d.slot))
            for loser in claimants[1:]:
                _restrict(loser, loser.pick)
                _pick(loser, rule, rng)
        if conflict:
            continue

        stay = sum(
            1
            for d in decisions
            if lay.zone_of(d.slot) is Zone.WAITING and d.pick == int(SlotAction.STAY)
        )
        entrants = [
            d for d in decisions if d.pick == int(SlotAction.GO_TO_WAITING)
        ]
        if stay + len(entrants) > lay.n_waiting:
            entrants.sort(key=lambda d: (d.pick_prob, -d.slot))
            bumped = entrants[0]
            _restrict(bumped, bumped.pick)
            _pick(bumped, rule, rng)
            continue
        break
    return JointAction(actions=tuple(SlotAction(d.pick) for d in decisions))


def rollout(
    policy,
    state: PortState,
    carry,
    n_steps: int,
    arrivals_fn=None,
    rule: str = "argmax",
    seed: int = 0,
):
    """Simulate ``n_steps`` windows under the policy.

    ``arrivals_fn(window)`` supplies exogenous arrivals stamped with that
    window; any that do not fit — no queue headroom, or the vessel is still
    inside the simulated port — are deferred to later windows in order, the
    same admission gate the data generator applies. Returns (states, actions)
    with ``states[0]`` the given start state.
    """
    rng = np.random.default_rng(seed)
    states = [state]
    actions = []
    pending: deque[int] = deque()
    for _ in range(n_steps):
        dists, carry = policy.step(state, carry)
        ja = decide_joint(state, dists, rule, rng)
        post = apply_transition(state, ja, ())
        w_next = state.window + 1
        if arrivals_fn is not None:
            for ev in arrivals_fn(w_next):
                pending.append(ev.imo)
        lay = post.layout
        headroom = max(
            min(
                lay.n_incoming - incoming_count(post),
                lay.n_waiting - waiting_count(post) - incoming_count(post),
            ),
            0,
        )
        admitted: list[ArrivalEvent] = []
        present = set(post.vessels())
        deferred: deque[int] = deque()
        while pending:
            imo = pending.popleft()
            if len(admitted) < headroom and imo not in present:
                admitted.append(ArrivalEvent(imo=imo, window=w_next))
                present.add(imo)
            else:
                deferred.append(imo)
        pending = deferred
        state = apply_transition(state, ja, tuple(admitted))
        states.append(state)
        actions.append(ja)
    return states, actions


def ratio(correct: int, total: int):
    """Accuracy as a fraction; undefined (None) when nothing was measured."""
    return correct / total if total else None


@dataclass(frozen=True)
class ForecastConfig:
    """How a forward simulation is driven.

    ``horizon`` counts windows to roll (1 suffices for next-window
    congestion), ``rule`` picks actions by argmax or seeded sampling.
    """

    horizon: int = 1
    rule: str = "argmax"
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.rule not in ("argmax", "sample"):
            raise ValueError(f"unknown decision rule {self.rule!r}")


def predict_congestion(
    policy,
    state: PortState,
    arrivals: list[ArrivalEvent] = (),
    config: ForecastConfig = ForecastConfig(),
    carry=None,
) -> bool:
    """Forecast the next window's congestion flag under the policy.

    Identical by construction to rolling one window forward and reading
    ``is_congested`` off the simulated successor; ``arrivals`` supplies the
    exogenous entrants for that window.
    """
    if carry is None:
        carry = policy.begin()
    events = list(arrivals)
    states, _ = rollout(
        policy,
        state,
        carry,
        1,
        arrivals_fn=lambda w: [ev for ev in events if ev.window == w],
        rule=config.rule,
        seed=config.seed,
    )
    return is_congested(states[1])


def predict_departures(
    policy,
    state: PortState,
    arrivals_fn=None,
    config: ForecastConfig = ForecastConfig(),
    carry=None,
) -> dict[int, int | None]:
    """Predicted departure window for every vessel currently in port.

    Simulates ``config.horizon`` windows and reports the first window in
    which each vessel's action comes out as leaving; vessels that never do
    within the horizon map to None (unresolved).
    """
    if carry is None:
        carry = policy.begin()
    states, actions = rollout(
        policy,
        state,
        carry,
        config.horizon,
        arrivals_fn=arrivals_fn,
        rule=config.rule,
        seed=config.seed,
    )
    return {
        imo: _predicted_leave_window(states, actions, imo)
        for imo in sorted(state.vessels())
    }


def _flat_actions(seq) -> list[SlotAction]:
    out: list[SlotAction] = []
    for item in seq:
        if isinstance(item, JointAction):
            out.extend(item.actions)
        else:
            out.append(SlotAction(item))
    return out


def action_accuracy(predicted, true, include_nothing: bool = False):
    """Fraction of matching per-slot actions between aligned sequences.

    Accepts sequences of joint actions or of bare slot actions. Positions
    whose true action is the idle one are excluded unless
    ``include_nothing`` is set; an empty denominator yields None.
    """
    p, t = _flat_actions(predicted), _flat_actions(true)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} predicted vs {len(t)} true")
    pairs = [
        (a, b)
        for a, b in zip(p, t)
        if include_nothing or b is not SlotAction.NOTHING
    ]
    return ratio(sum(a is b for a, b in pairs), len(pairs))


def event_accuracy(predicted, true):
    """Exact-match fraction between aligned event sequences.

    Events compare by equality (congestion flags, departure windows, ...);
    an empty comparison is undefined and reported as None.
    """
    p, t = list(predicted), list(true)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} predicted vs {len(t)} true")
    return ratio(sum(a == b for a, b in zip(p, t)), len(p))


@dataclass
class EvaluationReport:
    """Everything the evaluation run measured, JSON-serializable."""

    action_accuracy: float | None = None
    action_accuracy_incl_nothing: float | None = None
    baseline_action_accuracy: float | None = None
    congestion_accuracy: float | None = None
    baseline_congestion_accuracy: float | None = None
    departure_exact: float | None = None
    departure_mae: float | None = None
    n_action_slots: int = 0
    n_congestion_windows: int = 0
    n_departure_pairs: int = 0
    confusion: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "action_accuracy": self.action_accuracy,
            "action_accuracy_incl_nothing": self.action_accuracy_incl_nothing,
            "baseline_action_accuracy": self.baseline_action_accuracy,
            "congestion_accuracy": self.congestion_accuracy,
            "baseline_congestion_accuracy": self.baseline_congestion_accuracy,
            "departure_exact": self.departure_exact,
            "departure_mae": self.departure_mae,
            "counts": {
                "action_slots": self.n_action_slots,
                "congestion_windows": self.n_congestion_windows,
                "departure_pairs": self.n_departure_pairs,
            },
            "confusion": self.confusion,
        }


def _actual_leave_window(seg: Segment, t: int, imo: int) -> int:
    for u in range(t, seg.n_steps):
        slot = seg.states[u].find_vessel(imo)
        if slot is not None and seg.actions[u].actions[slot] is SlotAction.LEAVE_SYSTEM:
            return seg.states[u].window
    raise RolloutError(f"vessel {imo} never leaves its segment")


def _predicted_leave_window(states, actions, imo) -> int | None:
    for u, ja in enumerate(actions):
        slot = states[u].find_vessel(imo)
        if slot is not None and ja.actions[slot] is SlotAction.LEAVE_SYSTEM:
            return states[u].window
    return None


def evaluate(
    policy,
    segments: list[Segment],
    test_refs: list[WindowRef],
    train_refs: list[WindowRef],
    departure_horizon: int = 60,
    rule: str = "argmax",
    seed: int = 0,
):
    """Score a policy on held-out windows; returns (report, plot_rows).

    The policy walks each segment teacher-forced (the carry always reflects
    the true history), predictions happen at the held-out windows: the joint
    action, the successor's congestion flag with true arrivals, and each
    present vessel's departure window via a rollout capped at
    ``departure_horizon`` windows. Majority-class baselines for actions and
    congestion are fitted on the training windows.
    """
    test_set = {(r.segment, r.t) for r in test_refs}
    rng = np.random.default_rng(seed)
    one_step = ForecastConfig(horizon=1, rule=rule, seed=seed)

    baseline = MajorityActionBaseline(segments, train_refs)
    train_cong = [
        is_congested(segments[r.segment].states[r.t + 1]) for r in train_refs
    ]
    baseline_cong = (
        (sum(train_cong) * 2 >= len(train_cong)) if train_cong else False
    )

    true_jas: list[JointAction] = []
    pred_jas: list[JointAction] = []
    base_jas: list[JointAction] = []
    cong_true: list[bool] = []
    cong_pred: list[bool] = []
    dep_actual: list[int] = []
    dep_pred: list[int | None] = []
    confusion: Counter = Counter()
    cong_rows = []
    dep_rows = []

    for si, seg in enumerate(segments):
        carry = policy.begin()
        for t in range(seg.n_steps):
            state = seg.states[t]
            dists, next_carry = policy.step(state, carry)
            if (si, t) in test_set:
                predicted = decide_joint(state, dists, rule, rng)
                truth = seg.actions[t]
                true_jas.append(truth)
                pred_jas.append(predicted)
                base_jas.append(JointAction(actions=baseline.predict(state)))
                for i in range(state.layout.n_slots):
                    if state.slots[i] != 0:
                        confusion[
                            (truth.actions[i].name, predicted.actions[i].name)
                        ] += 1

                true_flag = is_congested(seg.states[t + 1])
                pred_flag = predict_congestion(
                    policy, state, seg.arrivals[t + 1], one_step, carry
                )
                cong_true.append(true_flag)
                cong_pred.append(pred_flag)
                cong_rows.append(
                    {
                        "window": state.window,
                        "true": int(true_flag),
                        "predicted": int(pred_flag),
                    }
                )

                if state.vessels():
                    future = {
                        seg.states[u].window: seg.arrivals[u]
                        for u in range(t + 1, seg.n_steps + 1)
                    }
                    dep_cfg = ForecastConfig(
                        horizon=min(departure_horizon, seg.n_steps - t),
                        rule=rule,
                        seed=seed,
                    )
                    predicted_leaves = predict_departures(
                        policy,
                        state,
                        arrivals_fn=lambda w: future.get(w, []),
                        config=dep_cfg,
                        carry=carry,
                    )
                    for imo, pred in predicted_leaves.items():
                        actual = _actual_leave_window(seg, t, imo)
                        dep_actual.append(actual)
                        dep_pred.append(pred)
                        dep_rows.append(
                            {
                                "window": state.window,
                                "imo": imo,
                                "actual": actual,
                                "predicted": pred if pred is not None else "",
                            }
                        )
            carry = next_carry

    n_action_slots = sum(
        1 for ja in true_jas for a in ja.actions if a is not SlotAction.NOTHING
    )
    dep_errors = [
        abs(p - a) for p, a in zip(dep_pred, dep_actual) if p is not None
    ]
    report = EvaluationReport(
        action_accuracy=action_accuracy(pred_jas, true_jas),
        action_accuracy_incl_nothing=action_accuracy(
            pred_jas, true_jas, include_nothing=True
        ),
        baseline_action_accuracy=action_accuracy(base_jas, true_jas),
        congestion_accuracy=event_accuracy(cong_pred, cong_true),
        baseline_congestion_accuracy=event_accuracy(
            [baseline_cong] * len(cong_true), cong_true
        ),
        departure_exact=event_accuracy(dep_pred, dep_actual),
        departure_mae=(float(np.mean(dep_errors)) if dep_errors else None),
        n_action_slots=n_action_slots,
        n_congestion_windows=len(cong_true),
        n_departure_pairs=len(dep_actual),
        confusion={f"{t}->{p}": c for (t, p), c in sorted(confusion.items())},
    )
    plots = {"congestion": cong_rows, "departures": dep_rows}
    return report, plots


def write_report_json(path, report: EvaluationReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_plot_csvs(congestion_path, departures_path, plots: dict) -> None:
    with open(congestion_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window", "true", "predicted"])
        for row in plots["congestion"]:
            writer.writerow([row["window"], row["true"], row["predicted"]])
    with open(departures_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window", "imo", "actual_leave_window", "predicted_leave_window"])
        for row in plots["departures"]:
            writer.writerow([row["window"], row["imo"], row["actual"], row["predicted"]])
