"""Synthetic port traffic: an enumerable miniature model and a full-size generator.

The miniature model keeps the slot mechanics but shrinks the layout until the
whole state space fits in memory, giving exact targets for the solver tests.
The full-size generator simulates a rule-based scheduler on the real layout
and emits the CSV files an operator would export, so ingestion can be checked
end to end against known ground truth.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import (
    WINDOW_SECONDS,
    ArrivalEvent,
    JointAction,
    PortLayout,
    PortState,
    SlotAction,
    VesselAttrs,
    apply_transition,
    free_berths,
    incoming_count,
    legal_actions,
    validate_joint_action,
    waiting_count,
)

TOY_LAYOUT = PortLayout(n_berths=2, n_waiting=2, n_incoming=1, unique_ids=False)

N_TOY_FEATURES = 12


@dataclass(frozen=True)
class ToyMDPConfig:
    """Parameters of the miniature model.

    Occupants are vessel *types* (duplicates allowed), staytimes clamp at
    ``staytime_cap``, and after each move a single vessel arrives with
    probability ``arrival_prob`` (uniform over types) whenever admitting it
    cannot wedge the port.
    """

    layout: PortLayout = TOY_LAYOUT
    n_types: int = 2
    staytime_cap: int = 1
    arrival_prob: float = 0.5
    max_states: int = 1_000_000


class StateSpaceError(RuntimeError):
    """Enumeration exceeded the configured state budget."""


def _toy_canon(state: PortState, cap: int) -> PortState:
    """Canonical form used as the enumeration key: window 0, staytimes capped."""
    stays = tuple(min(st, cap) for st in state.staytimes)
    return dataclasses.replace(state, window=0, staytimes=stays)


def _arrival_admissible(state: PortState) -> bool:
    # Admit only when, even if every berth fills up, all incoming vessels
    # (the newcomer included) could still reach the waiting area next window.
    lay = state.layout
    waiting_free = lay.n_waiting - waiting_count(state)
    if incoming_count(state) >= lay.n_incoming:
        return False
    return waiting_free >= incoming_count(state) + 1


def toy_joint_actions(state: PortState) -> list[JointAction]:
    """All valid joint actions of ``state``, in a deterministic order."""
    per_slot = [
        sorted(legal_actions(state, i)) for i in range(state.layout.n_slots)
    ]
    out = []
    for combo in itertools.product(*per_slot):
        ja = JointAction(actions=combo)
        if validate_joint_action(state, ja).valid:
            out.append(ja)
    return out


def toy_successors(
    state: PortState, action: JointAction, config: ToyMDPConfig
) -> list[tuple[PortState, float]]:
    """Successor distribution of one (state, action) pair.

    The deterministic move happens first; an arrival of each vessel type then
    lands with probability ``arrival_prob / n_types`` if the admission gate is
    open. Zero-probability branches are dropped and duplicates merged.
    """
    post = apply_transition(state, action, ())
    base = _toy_canon(post, config.staytime_cap)
    p = config.arrival_prob
    branches: dict[PortState, float] = {}
    if _arrival_admissible(base) and p > 0.0:
        if p < 1.0:
            branches[base] = 1.0 - p
        for t in range(1, config.n_types + 1):
            ev = ArrivalEvent(imo=t, window=state.window + 1)
            with_arrival = apply_transition(state, action, (ev,))
            key = _toy_canon(with_arrival, config.staytime_cap)
            branches[key] = branches.get(key, 0.0) + p / config.n_types
    else:
        branches[base] = 1.0
    return list(branches.items())


def toy_features(state: PortState, action: JointAction) -> np.ndarray:
    """Feature vector of one (state, action) pair, every entry in [0, 1]."""
    lay = state.layout
    cap = max(max(state.staytimes, default=1), 1)
    berth_occ = [i for i in lay.berth_slots if state.slots[i] != 0]
    wait_occ = [i for i in lay.waiting_slots if state.slots[i] != 0]
    occupied = len(berth_occ) + len(wait_occ) + incoming_count(state)

    def frac(pred) -> float:
        if occupied == 0:
            return 0.0
        return sum(1 for a in action.actions if pred(a)) / occupied

    stay_berth = sum(
        1 for i in berth_occ if action.actions[i] is SlotAction.STAY
    )
    go_berth = sum(1 for a in action.actions if a.berth_target is not None)
    phi = np.array(
        [
            1.0,
            len(berth_occ) / lay.n_berths,
            len(wait_occ) / lay.n_waiting,
            incoming_count(state) / lay.n_incoming,
            (sum(state.staytimes[i] for i in berth_occ) / (len(berth_occ) * cap))
            if berth_occ
            else 0.0,
            (sum(state.staytimes[i] for i in wait_occ) / (len(wait_occ) * cap))
            if wait_occ
            else 0.0,
            frac(lambda a: a is SlotAction.LEAVE_SYSTEM),
            stay_berth / lay.n_berths,
            frac(lambda a: a.berth_target is not None),
            frac(lambda a: a is SlotAction.GO_TO_WAITING),
            sum(1 for a in action.actions if a is SlotAction.NOTHING) / lay.n_slots,
            (stay_berth + go_berth) / lay.n_berths,
        ],
        dtype=np.float64,
    )
    assert phi.shape == (N_TOY_FEATURES,)
    return phi


@dataclass
class ToyMDP:
    """Fully enumerated miniature model in flat-array form.

    ``sa_ptr[s]:sa_ptr[s+1]`` spans state ``s``'s rows in the flat
    state-action axis; ``succ_ptr`` does the same per row into the successor
    index/probability arrays. ``phi`` holds one feature vector per row.
    """

    config: ToyMDPConfig
    states: list[PortState]
    state_index: dict[PortState, int]
    actions: list[list[JointAction]]
    sa_ptr: np.ndarray
    succ_ptr: np.ndarray
    succ_idx: np.ndarray
    succ_prob: np.ndarray
    phi: np.ndarray
    terminal: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.terminal is None:
            self.terminal = np.zeros(len(self.states), dtype=np.uint8)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_sa(self) -> int:
        return int(self.sa_ptr[-1])

    def sa_index(self, state_idx: int, action_local: int) -> int:
        return int(self.sa_ptr[state_idx]) + action_local


def enumerate_toy_mdp(config: ToyMDPConfig = ToyMDPConfig()) -> ToyMDP:
    """Breadth-first closure of the miniature model from the empty port.

    Raises ``StateSpaceError`` past ``config.max_states`` states.
    """
    start = _toy_canon(PortState.empty(layout=config.layout), config.staytime_cap)
    states: list[PortState] = [start]
    index: dict[PortState, int] = {start: 0}
    queue: deque[int] = deque([0])
    actions: list[list[JointAction]] = []
    successors: list[list[list[tuple[int, float]]]] = []

    while queue:
        s_idx = queue.popleft()
        state = states[s_idx]
        acts = toy_joint_actions(state)
        if not acts:
            raise StateSpaceError(
                f"state {s_idx} has no valid joint action: {state.slots}"
            )
        succ_rows: list[list[tuple[int, float]]] = []
        for ja in acts:
            row = []
            for nxt, prob in toy_successors(state, ja, config):
                if nxt not in index:
                    if len(states) >= config.max_states:
                        raise StateSpaceError(
                            f"more than {config.max_states} states reachable"
                        )
                    index[nxt] = len(states)
                    states.append(nxt)
                    queue.append(index[nxt])
                row.append((index[nxt], prob))
            succ_rows.append(row)
        # BFS pops in index order, so these lists stay aligned with `states`
        actions.append(acts)
        successors.append(succ_rows)

    sa_ptr = np.zeros(len(states) + 1, dtype=np.int64)
    for s, acts in enumerate(actions):
        sa_ptr[s + 1] = sa_ptr[s] + len(acts)
    n_sa = int(sa_ptr[-1])

    succ_ptr = np.zeros(n_sa + 1, dtype=np.int64)
    flat_idx: list[int] = []
    flat_prob: list[float] = []
    phi = np.zeros((n_sa, N_TOY_FEATURES), dtype=np.float64)
    row = 0
    for s, acts in enumerate(actions):
        for a_local, ja in enumerate(acts):
            entries = successors[s][a_local]
            succ_ptr[row + 1] = succ_ptr[row] + len(entries)
            for nxt, prob in entries:
                flat_idx.append(nxt)
                flat_prob.append(prob)
            phi[row] = toy_features(states[s], ja)
            row += 1

    return ToyMDP(
        config=config,
        states=states,
        state_index=index,
        actions=actions,
        sa_ptr=sa_ptr,
        succ_ptr=succ_ptr,
        succ_idx=np.array(flat_idx, dtype=np.int64),
        succ_prob=np.array(flat_prob, dtype=np.float64),
        phi=phi,
    )


def brute_force_soft_values(
    reward_sa,
    mdp: ToyMDP,
    gamma: float,
    horizon: int = 250,
    v_definition: str = "expected_q",
):
    """Finite-horizon backward recursion for the soft values.

    Deliberately written with plain Python loops and ``math`` so it shares no
    code path with the production solver; used only to cross-check it. Returns
    ``(Q, V, logZ)`` as lists, ``Q`` flat over state-action rows.
    """
    n_states = mdp.n_states
    reward = [float(r) for r in np.asarray(reward_sa, dtype=np.float64)]
    v = [0.0] * n_states
    q = [0.0] * mdp.n_sa
    logz = [0.0] * n_states
    for _ in range(horizon):
        q_new = [0.0] * mdp.n_sa
        v_new = [0.0] * n_states
        logz_new = [0.0] * n_states
        for s in range(n_states):
            lo, hi = int(mdp.sa_ptr[s]), int(mdp.sa_ptr[s + 1])
            vals = []
            for row in range(lo, hi):
                expv = 0.0
                for k in range(int(mdp.succ_ptr[row]), int(mdp.succ_ptr[row + 1])):
                    expv += float(mdp.succ_prob[k]) * v[int(mdp.succ_idx[k])]
                q_new[row] = reward[row] + gamma * expv
                vals.append(q_new[row])
            m = max(vals)
            z = sum(math.exp(x - m) for x in vals)
            logz_new[s] = m + math.log(z)
            if v_definition == "expected_q":
                v_new[s] = sum(
                    math.exp(x - logz_new[s]) * x for x in vals
                )
            elif v_definition == "logsumexp":
                v_new[s] = logz_new[s]
            else:
                raise ValueError(f"unknown v_definition {v_definition!r}")
            if mdp.terminal[s]:
                v_new[s] = 0.0
        q, v, logz = q_new, v_new, logz_new
    return q, v, logz


def toy_sample_trajectories(
    mdp: ToyMDP,
    policy_sa,
    n_traj: int,
    n_steps: int,
    seed: int,
    start_state: int = 0,
):
    """Roll out ``n_traj`` trajectories under a flat per-row policy.

    ``policy_sa[row]`` is the probability of that state-action row given its
    state. Returns lists of (state_index, local_action_index) pairs.
    """
    rng = np.random.default_rng(seed)
    policy = np.asarray(policy_sa, dtype=np.float64)
    trajs = []
    for _ in range(n_traj):
        s = start_state
        steps = []
        for _ in range(n_steps):
            lo, hi = int(mdp.sa_ptr[s]), int(mdp.sa_ptr[s + 1])
            probs = policy[lo:hi]
            a_local = int(rng.choice(hi - lo, p=probs / probs.sum()))
            steps.append((s, a_local))
            row = lo + a_local
            ks = slice(int(mdp.succ_ptr[row]), int(mdp.succ_ptr[row + 1]))
            succ_p = mdp.succ_prob[ks]
            pick = int(rng.choice(len(succ_p), p=succ_p / succ_p.sum()))
            s = int(mdp.succ_idx[ks][pick])
        trajs.append(steps)
    return trajs


# ---------------------------------------------------------------------------
# Full-size generator
# ---------------------------------------------------------------------------

ARRIVAL_SPACING_SECONDS = 997  # offsets arrivals within a window, keeps order


@dataclass(frozen=True)
class FleetConfig:
    n_vessels: int = 40
    n_size_classes: int = 4
    n_carriers: int = 5
    arrival_prob: float = 0.28
    cooldown_windows: int = 2
    base_imo: int = 9100000

    def __post_init__(self):
        if min(self.n_vessels, self.n_size_classes, self.n_carriers) < 1:
            raise ValueError("fleet counts must all be at least 1")
        if not 0.0 <= self.arrival_prob <= 1.0:
            raise ValueError("arrival_prob must lie in [0, 1]")


@dataclass(frozen=True)
class ExpertRule:
    """Hand-written scheduler the learner is later asked to imitate.

    Berth occupants sail once served for ``service_by_size[size-1]`` windows.
    Waiting vessels are ranked by a weighted priority of size, carrier and
    time already spent waiting; the best ones take the free berths, lowest
    berth number first. Arrivals always join the queue.
    """

    w_size: float = 1.0
    w_carrier: float = 0.5
    w_staytime: float = 2.0
    service_by_size: tuple[int, ...] = (1, 2, 2, 3)

    def __post_init__(self):
        if not self.service_by_size or min(self.service_by_size) < 1:
            raise ValueError("service durations must all be at least 1 window")

    def service_windows(self, size_class: int) -> int:
        return self.service_by_size[size_class - 1]

    def priority(self, attrs: VesselAttrs, staytime: int) -> float:
        return (
            self.w_size * attrs.size_class
            + self.w_carrier * attrs.carrier_code
            + self.w_staytime * staytime
        )


@dataclass(frozen=True)
class VisitRow:
    """One completed port call, as exported to the visits CSV."""

    imo: int
    arrival_ts: int
    waiting_enter_ts: int
    waiting_exit_ts: int
    berth_enter_ts: int
    berth_exit_ts: int
    berth_id: int


@dataclass
class SynthResult:
    """Ground truth from one simulation run.

    ``states[w]`` is the port at window ``w``; ``actions[w]`` maps it to
    ``states[w+1]``; ``arrivals[w]`` lists the events stamped window ``w``
    (consumed by the transition into that window). The final state is empty.
    """

    registry: dict[int, VesselAttrs]
    visits: list[VisitRow]
    states: list[PortState]
    actions: list[JointAction]
    arrivals: list[list[ArrivalEvent]]


def expert_actions(
    state: PortState, registry: dict[int, VesselAttrs], rule: ExpertRule
) -> JointAction:
    """The scheduler's joint action for one window."""
    lay = state.layout
    acts = [SlotAction.NOTHING] * lay.n_slots
    for b in lay.berth_slots:
        imo = state.slots[b]
        if imo == 0:
            continue
        served = state.staytimes[b] >= rule.service_windows(
            registry[imo].size_class
        )
        acts[b] = SlotAction.LEAVE_SYSTEM if served else SlotAction.STAY
    waiting = [
        (-rule.priority(registry[state.slots[w]], state.staytimes[w]), w)
        for w in lay.waiting_slots
        if state.slots[w] != 0
    ]
    waiting.sort()
    for (_, w), berth in zip(waiting, free_berths(state)):
        acts[w] = SlotAction(int(SlotAction.GO_TO_BERTH_1) + berth)
    for _, w in waiting:
        if acts[w] is SlotAction.NOTHING:
            acts[w] = SlotAction.STAY
    for i in lay.incoming_slots:
        if state.slots[i] != 0:
            acts[i] = SlotAction.GO_TO_WAITING
    return JointAction(actions=tuple(acts))


def _make_registry(cfg: FleetConfig, rng: np.random.Generator) -> dict[int, VesselAttrs]:
    registry = {}
    for k in range(cfg.n_vessels):
        imo = cfg.base_imo + k
        registry[imo] = VesselAttrs(
            size_class=int(rng.integers(1, cfg.n_size_classes + 1)),
            carrier_code=int(rng.integers(1, cfg.n_carriers + 1)),
        )
    return registry


def generate_dataset(
    fleet: FleetConfig = FleetConfig(),
    rule: ExpertRule = ExpertRule(),
    n_windows: int = 400,
    seed: int = 0,
    quiet_spans: tuple[tuple[int, int], ...] = (),
) -> SynthResult:
    """Simulate the scheduler and return states, actions and visit records.

    Arrivals are Bernoulli per free incoming slot per window, assigned to
    idle vessels drawn from the fleet, suppressed inside ``quiet_spans``
    (half-open window ranges) and admitted only while the queue has room to
    absorb every incoming vessel. After ``n_windows`` the
    arrival process stops and the simulation runs until the port drains, so
    every visit in the output is complete.
    """
    rng = np.random.default_rng(seed)
    registry = _make_registry(fleet, rng)
    fleet_ids = sorted(registry)

    state = PortState.empty(window=0)
    states = [state]
    actions: list[JointAction] = []
    arrivals_log: list[list[ArrivalEvent]] = [[]]
    visits: list[VisitRow] = []
    open_visits: dict[int, dict] = {}
    cooldown_until: dict[int, int] = {}

    w = 0
    drained_limit = n_windows + 200
    while True:
        ja = expert_actions(state, registry, rule)

        # departures close their visit records
        for b in state.layout.berth_slots:
            if ja.actions[b] is SlotAction.LEAVE_SYSTEM:
                imo = state.slots[b]
                rec = open_visits.pop(imo)
                rec["berth_exit_ts"] = (w + 1) * WINDOW_SECONDS
                visits.append(VisitRow(**rec))
                cooldown_until[imo] = w + 1 + fleet.cooldown_windows

        # draw next window's arrivals
        post = apply_transition(state, ja, ())
        quiet = any(a <= w + 1 < b for a, b in quiet_spans)
        new_events: list[ArrivalEvent] = []
        if w + 1 <= n_windows and not quiet:
            in_port = state.vessels() | post.vessels()
            idle = [
                v
                for v in fleet_ids
                if v not in in_port and cooldown_until.get(v, 0) <= w + 1
            ]
            lay = post.layout
            free_incoming = lay.n_incoming - incoming_count(post)
            drawn = sum(
                1 for _ in range(free_incoming) if rng.random() < fleet.arrival_prob
            )
            headroom = min(
                free_incoming,
                lay.n_waiting - waiting_count(post) - incoming_count(post),
            )
            n_admit = min(drawn, max(headroom, 0), len(idle))
            sampled = [
                int(v) for v in rng.choice(idle, size=n_admit, replace=False)
            ] if n_admit else []
            for k, imo in enumerate(sampled):
                new_events.append(ArrivalEvent(imo=imo, window=w + 1))
                open_visits[imo] = {
                    "imo": imo,
                    "arrival_ts": (w + 1) * WINDOW_SECONDS
                    + k * ARRIVAL_SPACING_SECONDS,
                    "waiting_enter_ts": 0,
                    "waiting_exit_ts": 0,
                    "berth_enter_ts": 0,
                    "berth_exit_ts": 0,
                    "berth_id": 0,
                }

        nxt = apply_transition(state, ja, tuple(new_events))

        # stamp zone changes
        for i in state.layout.incoming_slots:
            if ja.actions[i] is SlotAction.GO_TO_WAITING:
                open_visits[state.slots[i]]["waiting_enter_ts"] = (
                    w + 1
                ) * WINDOW_SECONDS
        for i, act in enumerate(ja.actions):
            berth = act.berth_target
            if berth is not None:
                rec = open_visits[state.slots[i]]
                rec["waiting_exit_ts"] = (w + 1) * WINDOW_SECONDS
                rec["berth_enter_ts"] = (w + 1) * WINDOW_SECONDS
                rec["berth_id"] = berth + 1

        actions.append(ja)
        arrivals_log.append(new_events)
        states.append(nxt)
        state = nxt
        w += 1
        if w > n_windows and not state.vessels():
            break
        if w >= drained_limit:
            raise RuntimeError("port failed to drain after the arrival cutoff")

    visits.sort(key=lambda r: (r.arrival_ts, r.imo))
    return SynthResult(
        registry=registry,
        visits=visits,
        states=states,
        actions=actions,
        arrivals=arrivals_log,
    )


def write_visits_csv(path, visits: list[VisitRow]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "imo",
                "arrival_ts",
                "waiting_enter_ts",
                "waiting_exit_ts",
                "berth_enter_ts",
                "berth_exit_ts",
                "berth_id",
            ]
        )
        for r in visits:
            writer.writerow(
                [
                    r.imo,
                    r.arrival_ts,
                    r.waiting_enter_ts,
                    r.waiting_exit_ts,
                    r.berth_enter_ts,
                    r.berth_exit_ts,
                    r.berth_id,
                ]
            )


def write_registry_csv(path, registry: dict[int, VesselAttrs]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["imo", "size_class", "carrier_code"])
        for imo in sorted(registry):
            attrs = registry[imo]
            writer.writerow([imo, attrs.size_class, attrs.carrier_code])


def write_arrivals_csv(path, arrivals: list[list[ArrivalEvent]]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window", "imo"])
        for events in arrivals:
            for ev in events:
                writer.writerow([ev.window, ev.imo])
