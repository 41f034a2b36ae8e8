"""Discrete port MDP: slot layout, per-slot actions, legality and transitions.

The port is a fixed array of slots split into three zones. Berth slots hold
vessels being serviced, waiting slots hold the queue, and incoming slots hold
vessels that just arrived and must move on in the next time window. Time
advances in fixed windows; one joint action (one sub-action per slot) plus a
list of exogenous arrivals maps a state to its successor.

All types are immutable values and all operations are pure functions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

N_ACTIONS = 10
CONGESTION_THRESHOLD = 3  # vessels simultaneously in the waiting area
WINDOW_SECONDS = 8 * 3600  # one scheduling window


class SlotAction(enum.IntEnum):
    """Per-slot scheduling instruction (1-based wire indices)."""

    NOTHING = 1
    STAY = 2
    GO_TO_WAITING = 3
    GO_TO_BERTH_1 = 4
    GO_TO_BERTH_2 = 5
    GO_TO_BERTH_3 = 6
    GO_TO_BERTH_4 = 7
    GO_TO_BERTH_5 = 8
    GO_TO_BERTH_6 = 9
    LEAVE_SYSTEM = 10

    @property
    def berth_target(self) -> int | None:
        """0-based berth slot this action moves into, if it is a berth move."""
        if SlotAction.GO_TO_BERTH_1 <= self <= SlotAction.GO_TO_BERTH_6:
            return int(self) - int(SlotAction.GO_TO_BERTH_1)
        return None


def go_to_berth(berth: int) -> SlotAction:
    """Action that moves a vessel into 0-based berth slot ``berth``."""
    if not 0 <= berth <= 5:
        raise ValueError(f"berth index {berth} out of range")
    return SlotAction(int(SlotAction.GO_TO_BERTH_1) + berth)


class Zone(enum.Enum):
    BERTH = "berth"
    WAITING = "waiting"
    INCOMING = "incoming"


@dataclass(frozen=True)
class PortLayout:
    """Zone widths of the slot array.

    ``unique_ids=False`` relaxes the no-duplicate-occupant rule so that small
    enumerable models can use vessel *types* instead of individual identifiers.
    """

    n_berths: int = 6
    n_waiting: int = 7
    n_incoming: int = 6
    unique_ids: bool = True

    @property
    def n_slots(self) -> int:
        return self.n_berths + self.n_waiting + self.n_incoming

    @property
    def berth_slots(self) -> range:
        return range(0, self.n_berths)

    @property
    def waiting_slots(self) -> range:
        return range(self.n_berths, self.n_berths + self.n_waiting)

    @property
    def incoming_slots(self) -> range:
        return range(self.n_berths + self.n_waiting, self.n_slots)

    def zone_of(self, slot: int) -> Zone:
        if not 0 <= slot < self.n_slots:
            raise ValueError(f"slot {slot} out of range [0,{self.n_slots - 1}]")
        if slot < self.n_berths:
            return Zone.BERTH
        if slot < self.n_berths + self.n_waiting:
            return Zone.WAITING
        return Zone.INCOMING


DEFAULT_LAYOUT = PortLayout()


class InvalidStateError(ValueError):
    """A slot assignment violates the port state invariants."""


class TransitionError(ValueError):
    """A transition was rejected; carries the validator's violation list."""

    def __init__(self, violations: list["Violation"]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations) or "invalid transition")


class DecodeError(ValueError):
    """A one-hot action vector is malformed."""


@dataclass(frozen=True)
class VesselAttrs:
    """Static vessel attributes looked up by identifier."""

    size_class: int
    carrier_code: int


@dataclass(frozen=True)
class ArrivalEvent:
    """Exogenous arrival of vessel ``imo`` at the start of window ``window``."""

    imo: int
    window: int


@dataclass(frozen=True)
class PortState:
    """Snapshot of one time window.

    ``slots[i]`` is the occupant's identifier (0 = empty) and ``staytimes[i]``
    counts the windows, current one included, the occupant has spent in its
    present zone stint (berth slot, waiting area, or incoming).
    """

    slots: tuple[int, ...]
    window: int = 0
    staytimes: tuple[int, ...] = ()
    layout: PortLayout = field(default=DEFAULT_LAYOUT, compare=True)

    def __post_init__(self):
        lay = self.layout
        if not self.staytimes:
            object.__setattr__(
                self, "staytimes", tuple(1 if s else 0 for s in self.slots)
            )
        if len(self.slots) != lay.n_slots or len(self.staytimes) != lay.n_slots:
            raise InvalidStateError(
                f"expected {lay.n_slots} slots, got {len(self.slots)}"
            )
        seen: set[int] = set()
        for i, (imo, stay) in enumerate(zip(self.slots, self.staytimes)):
            if imo < 0:
                raise InvalidStateError(f"slot {i}: negative id {imo}")
            if imo == 0 and stay != 0:
                raise InvalidStateError(f"slot {i}: empty slot with staytime {stay}")
            if imo != 0 and stay < 1:
                raise InvalidStateError(f"slot {i}: occupied slot with staytime {stay}")
            if imo != 0 and lay.unique_ids:
                if imo in seen:
                    raise InvalidStateError(f"vessel {imo} occupies two slots")
                seen.add(imo)

    @classmethod
    def empty(cls, window: int = 0, layout: PortLayout = DEFAULT_LAYOUT) -> "PortState":
        return cls(slots=(0,) * layout.n_slots, window=window, layout=layout)

    def occupied_slots(self) -> list[int]:
        return [i for i, imo in enumerate(self.slots) if imo != 0]

    def vessels(self) -> set[int]:
        return {imo for imo in self.slots if imo != 0}

    def find_vessel(self, imo: int) -> int | None:
        """Slot index of ``imo``, or None. Requires a unique-id layout."""
        for i, occ in enumerate(self.slots):
            if occ == imo:
                return i
        return None


@dataclass(frozen=True)
class JointAction:
    """One sub-action per slot, aligned with a paired state."""

    actions: tuple[SlotAction, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "actions", tuple(SlotAction(a) for a in self.actions)
        )

    @classmethod
    def all_nothing(cls, layout: PortLayout = DEFAULT_LAYOUT) -> "JointAction":
        return cls(actions=(SlotAction.NOTHING,) * layout.n_slots)


@dataclass(frozen=True)
class Violation:
    """One reason a joint action is invalid for its paired state."""

    slot: int | None
    reason: str

    def __str__(self) -> str:
        where = "joint" if self.slot is None else f"slot {self.slot}"
        return f"{where}: {self.reason}"


@dataclass(frozen=True)
class ActionValidity:
    valid: bool
    violations: tuple[Violation, ...] = ()


def waiting_count(state: PortState) -> int:
    """Number of vessels currently in the waiting area."""
    return sum(1 for i in state.layout.waiting_slots if state.slots[i] != 0)


def incoming_count(state: PortState) -> int:
    return sum(1 for i in state.layout.incoming_slots if state.slots[i] != 0)


def is_congested(state: PortState) -> bool:
    """True when three or more vessels sit in the waiting area at once."""
    return waiting_count(state) >= CONGESTION_THRESHOLD


def free_berths(state: PortState) -> list[int]:
    """0-based berth slots that are empty in ``state``."""
    return [b for b in state.layout.berth_slots if state.slots[b] == 0]


def legal_actions(state: PortState, slot: int) -> frozenset[SlotAction]:
    """Set of sub-actions available to ``slot`` in ``state``.

    Empty slots can only do nothing. Berth occupants either stay or leave the
    system. Waiting occupants stay or move to an empty berth. Incoming
    occupants must move: to the waiting area if it has room, or to an empty
    berth; they may never stay put.
    """
    lay = state.layout
    zone = lay.zone_of(slot)
    if state.slots[slot] == 0:
        return frozenset({SlotAction.NOTHING})
    if zone is Zone.BERTH:
        return frozenset({SlotAction.STAY, SlotAction.LEAVE_SYSTEM})
    berth_moves = {go_to_berth(b) for b in free_berths(state) if b < 6}
    if zone is Zone.WAITING:
        return frozenset({SlotAction.STAY} | berth_moves)
    # incoming
    moves = set(berth_moves)
    if waiting_count(state) < lay.n_waiting:
        moves.add(SlotAction.GO_TO_WAITING)
    return frozenset(moves)


def validate_joint_action(state: PortState, action: JointAction) -> ActionValidity:
    """Check a joint action against per-slot legality and joint constraints.

    Joint constraints: no two slots may target the same berth, and the number
    of vessels moving into the waiting area must fit the space left by the
    vessels staying there. Always returns a verdict, never raises.
    """
    lay = state.layout
    violations: list[Violation] = []
    if len(action.actions) != lay.n_slots:
        return ActionValidity(False, (Violation(None, "wrong action length"),))

    claimed: dict[int, int] = {}
    waiting_stayers = 0
    waiting_entrants = 0
    for i, act in enumerate(action.actions):
        legal = legal_actions(state, i)
        if act not in legal:
            violations.append(Violation(i, f"illegal action {act.name}"))
            continue
        target = act.berth_target
        if target is not None:
            if target in claimed:
                violations.append(
                    Violation(i, f"berth {target + 1} also targeted by slot {claimed[target]}")
                )
            else:
                claimed[target] = i
        if lay.zone_of(i) is Zone.WAITING and act is SlotAction.STAY:
            waiting_stayers += 1
        if act is SlotAction.GO_TO_WAITING:
            waiting_entrants += 1
    if waiting_stayers + waiting_entrants > lay.n_waiting:
        violations.append(Violation(None, "waiting area over capacity"))
    return ActionValidity(not violations, tuple(violations))


def apply_transition(
    state: PortState,
    action: JointAction,
    arrivals: Sequence[ArrivalEvent] = (),
) -> PortState:
    """Advance one time window.

    Movers are relocated (staytime restarts at 1), stayers age by one window,
    leavers disappear, the waiting area is compacted to its lowest indices
    preserving relative order, and arrivals fill the lowest free incoming
    slots in input order. Raises ``TransitionError`` if the joint action is
    invalid or the arrivals do not fit.
    """
    verdict = validate_joint_action(state, action)
    if not verdict.valid:
        raise TransitionError(list(verdict.violations))

    lay = state.layout
    n = lay.n_slots
    new_slots = [0] * n
    new_stay = [0] * n

    # berth zone: stayers keep their slot, leavers vanish
    for b in lay.berth_slots:
        if action.actions[b] is SlotAction.STAY:
            new_slots[b] = state.slots[b]
            new_stay[b] = state.staytimes[b] + 1

    # moves into berths (targets are empty pre-transition and pairwise distinct)
    for i, act in enumerate(action.actions):
        target = act.berth_target
        if target is not None:
            new_slots[target] = state.slots[i]
            new_stay[target] = 1

    # waiting area: survivors first (in slot order), then entrants from
    # incoming (in slot order), compacted to the lowest indices
    queue: list[tuple[int, int]] = []
    for w in lay.waiting_slots:
        if action.actions[w] is SlotAction.STAY:
            queue.append((state.slots[w], state.staytimes[w] + 1))
    for i in lay.incoming_slots:
        if action.actions[i] is SlotAction.GO_TO_WAITING:
            queue.append((state.slots[i], 1))
    for offset, (imo, stay) in enumerate(queue):
        slot = lay.waiting_slots[offset]
        new_slots[slot] = imo
        new_stay[slot] = stay

    # arrivals occupy the lowest free incoming slots
    free_in = [i for i in lay.incoming_slots if new_slots[i] == 0]
    if len(arrivals) > len(free_in):
        raise TransitionError(
            [Violation(None, f"{len(arrivals)} arrivals but {len(free_in)} incoming slots free")]
        )
    new_window = state.window + 1
    present = {imo for imo in new_slots if imo != 0}
    for ev, slot in zip(arrivals, free_in):
        if ev.window != new_window:
            raise TransitionError(
                [Violation(None, f"arrival of {ev.imo} stamped window {ev.window}, expected {new_window}")]
            )
        if lay.unique_ids and ev.imo in present:
            raise TransitionError([Violation(None, f"arriving vessel {ev.imo} already present")])
        present.add(ev.imo)
        new_slots[slot] = ev.imo
        new_stay[slot] = 1

    return PortState(
        slots=tuple(new_slots),
        window=new_window,
        staytimes=tuple(new_stay),
        layout=lay,
    )


def encode_action(action: JointAction, layout: PortLayout = DEFAULT_LAYOUT):
    """Flatten a joint action into the one-hot block vector.

    Block ``i`` holds 10 entries for slot ``i``; sub-action with wire index
    ``k`` sets entry ``k - 1``, except NOTHING which encodes as an all-zero
    block. The default layout yields a vector of length 190.
    """
    import numpy as np

    vec = np.zeros(layout.n_slots * N_ACTIONS, dtype=np.float64)
    for i, act in enumerate(action.actions):
        if act is not SlotAction.NOTHING:
            vec[i * N_ACTIONS + (int(act) - 1)] = 1.0
    return vec


def decode_action(vec, layout: PortLayout = DEFAULT_LAYOUT) -> JointAction:
    """Inverse of :func:`encode_action`.

    Each 10-entry block must be all-zero (NOTHING) or one-hot; anything else
    raises ``DecodeError`` naming the offending block.
    """
    import numpy as np

    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (layout.n_slots * N_ACTIONS,):
        raise DecodeError(f"expected length {layout.n_slots * N_ACTIONS}, got {vec.shape}")
    actions: list[SlotAction] = []
    for i in range(layout.n_slots):
        block = vec[i * N_ACTIONS : (i + 1) * N_ACTIONS]
        hot = np.nonzero(block)[0]
        if any(v not in (0.0, 1.0) for v in block):
            raise DecodeError(f"block {i}: entries must be 0 or 1")
        if len(hot) == 0:
            actions.append(SlotAction.NOTHING)
        elif len(hot) == 1:
            actions.append(SlotAction(int(hot[0]) + 1))
        else:
            raise DecodeError(f"block {i}: {len(hot)} bits set")
    return JointAction(actions=tuple(actions))


def vessel_conservation_ok(
    before: PortState,
    after: PortState,
    leavers: Iterable[int],
    arrivals: Iterable[int],
) -> bool:
    """Check vessels(after) == vessels(before) - leavers + arrivals."""
    expected = (before.vessels() - set(leavers)) | set(arrivals)
    return after.vessels() == expected
