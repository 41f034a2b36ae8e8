"""From operator CSV exports to verified state-action trajectories.

Visits (one row per port call, timestamped) and a vessel registry are
discretized into fixed scheduling windows. Slot assignments are replayed
deterministically — arrivals fill the lowest incoming slots in arrival
order, the waiting queue compacts while preserving relative order, berth
numbers come straight from the data — and every inferred joint action is
verified by replaying it through the transition function. Anything the slot
model cannot represent is rejected with the offending row or window named.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .model import (
    DEFAULT_LAYOUT,
    WINDOW_SECONDS,
    ArrivalEvent,
    JointAction,
    PortLayout,
    PortState,
    SlotAction,
    VesselAttrs,
    Zone,
    apply_transition,
    go_to_berth,
    legal_actions,
)

PRUNE_GAP_WINDOWS = 21  # empty runs at least this long split the timeline


class PipelineError(ValueError):
    """Input data that cannot be represented as port trajectories."""


@dataclass(frozen=True)
class VisitRecord:
    """One port call. Timestamps are seconds; zero-length waiting is allowed."""

    imo: int
    arrival_ts: int
    waiting_enter_ts: int
    waiting_exit_ts: int
    berth_enter_ts: int
    berth_exit_ts: int
    berth_id: int

    @property
    def arrival_window(self) -> int:
        return self.arrival_ts // WINDOW_SECONDS


VISIT_COLUMNS = [
    "imo",
    "arrival_ts",
    "waiting_enter_ts",
    "waiting_exit_ts",
    "berth_enter_ts",
    "berth_exit_ts",
    "berth_id",
]


def load_visits(path) -> list[VisitRecord]:
    """Parse the visits CSV; malformed rows fail with their line number."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != VISIT_COLUMNS:
            raise PipelineError(f"{path}: expected header {VISIT_COLUMNS}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(VISIT_COLUMNS):
                raise PipelineError(
                    f"{path}:{lineno}: expected {len(VISIT_COLUMNS)} fields, got {len(row)}"
                )
            try:
                vals = [int(v) for v in row]
            except ValueError as exc:
                raise PipelineError(f"{path}:{lineno}: {exc}") from None
            rec = VisitRecord(*vals)
            if rec.imo <= 0:
                raise PipelineError(f"{path}:{lineno}: imo must be positive")
            ordered = (
                0
                <= rec.arrival_ts
                < rec.waiting_enter_ts
                <= rec.waiting_exit_ts
                <= rec.berth_enter_ts
                <= rec.berth_exit_ts
            )
            if not ordered or rec.berth_exit_ts <= rec.berth_enter_ts:
                raise PipelineError(
                    f"{path}:{lineno}: timestamps out of order for vessel {rec.imo}"
                )
            out.append(rec)
    return out


def load_registry(path) -> dict[int, VesselAttrs]:
    out: dict[int, VesselAttrs] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["imo", "size_class", "carrier_code"]:
            raise PipelineError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                imo, size_class, carrier = (int(v) for v in row)
            except ValueError as exc:
                raise PipelineError(f"{path}:{lineno}: {exc}") from None
            if imo in out:
                raise PipelineError(f"{path}:{lineno}: duplicate vessel {imo}")
            if size_class < 1 or carrier < 1:
                raise PipelineError(
                    f"{path}:{lineno}: size_class and carrier_code must be >= 1"
                )
            out[imo] = VesselAttrs(size_class=size_class, carrier_code=carrier)
    return out


def visit_zone_windows(rec: VisitRecord, layout: PortLayout) -> dict[Zone, list[int]]:
    """Windows a visit spends in each zone, under at-window-start semantics.

    The arrival window counts as incoming; any later window belongs to the
    zone whose interval covers the window's start. Gaps, overlaps, or a berth
    number outside the layout make the visit unrepresentable.
    """
    if not 1 <= rec.berth_id <= layout.n_berths:
        raise PipelineError(f"vessel {rec.imo}: berth_id {rec.berth_id} out of range")
    w0 = rec.arrival_window
    last = (rec.berth_exit_ts - 1) // WINDOW_SECONDS
    zones: dict[Zone, list[int]] = {Zone.INCOMING: [w0], Zone.WAITING: [], Zone.BERTH: []}
    for w in range(w0 + 1, last + 1):
        t = w * WINDOW_SECONDS
        in_wait = rec.waiting_enter_ts <= t < rec.waiting_exit_ts
        in_berth = rec.berth_enter_ts <= t < rec.berth_exit_ts
        if in_wait and in_berth:
            raise PipelineError(
                f"vessel {rec.imo}: window {w} start covered by both waiting and berth"
            )
        if in_wait:
            zones[Zone.WAITING].append(w)
        elif in_berth:
            zones[Zone.BERTH].append(w)
        else:
            raise PipelineError(
                f"vessel {rec.imo}: window {w} falls in no zone (gap in timestamps)"
            )
    if not zones[Zone.BERTH]:
        raise PipelineError(f"vessel {rec.imo}: never occupies its berth")
    for name, ws in zones.items():
        if ws and ws != list(range(ws[0], ws[0] + len(ws))):
            raise PipelineError(f"vessel {rec.imo}: {name.value} windows not contiguous")
    if zones[Zone.WAITING] and zones[Zone.WAITING][0] != w0 + 1:
        raise PipelineError(f"vessel {rec.imo}: does not enter waiting right after arrival")
    first_berth = zones[Zone.BERTH][0]
    expected = (zones[Zone.WAITING][-1] + 1) if zones[Zone.WAITING] else w0 + 1
    if first_berth != expected:
        raise PipelineError(f"vessel {rec.imo}: berth stint does not follow on directly")
    return zones


@dataclass
class Segment:
    """One contiguous stretch of port activity.

    ``states`` spans ``start_window .. start_window + len(states) - 1`` and
    always ends with an empty port; ``actions[t]`` maps ``states[t]`` to
    ``states[t+1]``. ``arrivals[t]`` lists the events that landed at
    ``states[t]`` — the transition ``t -> t+1`` therefore consumes
    ``arrivals[t+1]``, and ``arrivals[0]`` is always empty.
    """

    start_window: int
    states: list[PortState]
    actions: list[JointAction]
    arrivals: list[list[ArrivalEvent]]

    @property
    def n_steps(self) -> int:
        return len(self.actions)


@dataclass
class _Placement:
    """Per-window occupancy derived from the visit intervals."""

    incoming: list[VisitRecord]
    waiting: list[VisitRecord]
    berth: dict[int, VisitRecord]


def _window_placements(visits, layout) -> dict[int, _Placement]:
    placements: dict[int, _Placement] = {}

    def at(w) -> _Placement:
        if w not in placements:
            placements[w] = _Placement(incoming=[], waiting=[], berth={})
        return placements[w]

    seen_windows: dict[tuple[int, int], int] = {}
    for rec in visits:
        zones = visit_zone_windows(rec, layout)
        for zone, windows in zones.items():
            for w in windows:
                key = (rec.imo, w)
                if key in seen_windows:
                    raise PipelineError(
                        f"vessel {rec.imo}: overlapping visits at window {w}"
                    )
                seen_windows[key] = 1
                if zone is Zone.INCOMING:
                    at(w).incoming.append(rec)
                elif zone is Zone.WAITING:
                    at(w).waiting.append(rec)
                else:
                    slot = rec.berth_id - 1
                    if slot in at(w).berth:
                        raise PipelineError(
                            f"window {w}: berth {rec.berth_id} holds both vessel "
                            f"{at(w).berth[slot].imo} and {rec.imo}"
                        )
                    at(w).berth[slot] = rec
    for w, plc in placements.items():
        if len(plc.waiting) > layout.n_waiting:
            raise PipelineError(
                f"window {w}: {len(plc.waiting)} vessels waiting exceeds "
                f"{layout.n_waiting} slots"
            )
        if len(plc.incoming) > layout.n_incoming:
            raise PipelineError(
                f"window {w}: {len(plc.incoming)} arrivals exceed "
                f"{layout.n_incoming} incoming slots"
            )
        plc.incoming.sort(key=lambda r: (r.arrival_ts, r.imo))
    return placements


def _segment_ranges(occupied: list[int], prune_gap: int) -> list[tuple[int, int]]:
    """Contiguous activity spans, split wherever a long empty run sits."""
    if not occupied:
        return []
    ranges = []
    start = prev = occupied[0]
    for w in occupied[1:]:
        if w - prev >= prune_gap:
            ranges.append((start, prev))
            start = w
        prev = w
    ranges.append((start, prev))
    return ranges


def discretize(
    visits: list[VisitRecord],
    registry: dict[int, VesselAttrs],
    layout: PortLayout = DEFAULT_LAYOUT,
    prune_gap: int = PRUNE_GAP_WINDOWS,
) -> list[Segment]:
    """Turn visit intervals into verified per-window trajectories.

    Returns one segment per activity span after pruning empty stretches of
    ``prune_gap`` windows or more. Every vessel must be registered; every
    inferred action must replay to the observed successor state exactly.
    """
    for rec in visits:
        if rec.imo not in registry:
            raise PipelineError(f"vessel {rec.imo} missing from the registry")
    placements = _window_placements(visits, layout)
    ranges = _segment_ranges(sorted(placements), prune_gap)
    segments = []
    for start, end in ranges:
        segments.append(_realize_segment(start, end, placements, layout))
    return segments


def _realize_segment(start, end, placements, layout) -> Segment:
    empty = _Placement(incoming=[], waiting=[], berth={})
    states: list[PortState] = []
    arrivals: list[list[ArrivalEvent]] = [[]]
    wait_order_prev: list[int] = []  # imo order of the previous waiting queue

    for w in range(start, end + 2):  # one trailing empty window closes the segment
        plc = placements.get(w, empty)
        slots = [0] * layout.n_slots
        stays = [0] * layout.n_slots
        for slot, rec in plc.berth.items():
            zones = visit_zone_windows(rec, layout)
            slots[slot] = rec.imo
            stays[slot] = w - zones[Zone.BERTH][0] + 1

        survivors = [r for r in plc.waiting if r.imo in wait_order_prev]
        survivors.sort(key=lambda r: wait_order_prev.index(r.imo))
        entrants = [r for r in plc.waiting if r.imo not in wait_order_prev]
        if w == start and entrants:
            raise PipelineError(
                f"window {w}: segment starts with vessels already waiting"
            )
        prev_plc = placements.get(w - 1, empty)
        prev_incoming = [r.imo for r in prev_plc.incoming]
        for r in entrants:
            if r.imo not in prev_incoming:
                raise PipelineError(
                    f"vessel {r.imo}: appears in waiting at window {w} without "
                    f"arriving at window {w - 1}"
                )
        entrants.sort(key=lambda r: prev_incoming.index(r.imo))
        queue = survivors + entrants
        for offset, rec in enumerate(queue):
            slot = layout.waiting_slots[offset]
            slots[slot] = rec.imo
            stays[slot] = w - rec.arrival_window  # waiting began the window after arrival
        wait_order_prev = [r.imo for r in queue]

        for offset, rec in enumerate(plc.incoming):
            slot = layout.incoming_slots[offset]
            slots[slot] = rec.imo
            stays[slot] = 1
        states.append(
            PortState(slots=tuple(slots), window=w, staytimes=tuple(stays), layout=layout)
        )
        if w > start:
            arrivals.append(
                [ArrivalEvent(imo=r.imo, window=w) for r in plc.incoming]
            )

    if states[-1].vessels():
        raise PipelineError(
            f"window {end + 1}: expected the port to be empty after the segment"
        )
    actions = _infer_actions(states, layout)
    seg = Segment(
        start_window=start, states=states, actions=actions, arrivals=arrivals
    )
    _verify_replay(seg)
    return seg


def _infer_actions(states: list[PortState], layout: PortLayout) -> list[JointAction]:
    """Name each slot's sub-action by diffing consecutive states."""
    actions = []
    for t in range(len(states) - 1):
        cur, nxt = states[t], states[t + 1]
        acts = [SlotAction.NOTHING] * layout.n_slots
        for i in range(layout.n_slots):
            imo = cur.slots[i]
            if imo == 0:
                continue
            zone = layout.zone_of(i)
            dest = nxt.find_vessel(imo)
            if zone is Zone.BERTH:
                if dest == i:
                    acts[i] = SlotAction.STAY
                elif dest is None:
                    acts[i] = SlotAction.LEAVE_SYSTEM
                else:
                    raise PipelineError(
                        f"vessel {imo}: moved from berth slot {i} to slot {dest} "
                        f"at window {cur.window}"
                    )
            else:
                if dest is None:
                    raise PipelineError(
                        f"vessel {imo}: vanished from slot {i} at window {cur.window}"
                    )
                dest_zone = layout.zone_of(dest)
                if dest_zone is Zone.BERTH:
                    acts[i] = go_to_berth(dest)
                elif dest_zone is Zone.WAITING:
                    if zone is Zone.WAITING:
                        acts[i] = SlotAction.STAY
                    else:
                        acts[i] = SlotAction.GO_TO_WAITING
                else:
                    raise PipelineError(
                        f"vessel {imo}: illegal move into incoming at window "
                        f"{cur.window + 1}"
                    )
        actions.append(JointAction(actions=tuple(acts)))
    return actions


def _verify_replay(seg: Segment) -> None:
    """Every inferred action must reproduce the observed successor exactly."""
    for t in range(seg.n_steps):
        replayed = apply_transition(
            seg.states[t], seg.actions[t], tuple(seg.arrivals[t + 1])
        )
        if replayed != seg.states[t + 1]:
            raise PipelineError(
                f"replay mismatch at window {seg.states[t].window}: inferred "
                f"actions do not reproduce the observed state"
            )


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

N_STATE_FEATURES = 3  # per slot: size class, carrier code, staytime


@dataclass(frozen=True)
class FeatureScales:
    """Normalization constants, fixed on training data and stored with fits."""

    size_max: float
    carrier_max: float
    stay_max: float

    @classmethod
    def from_data(
        cls,
        registry: dict[int, VesselAttrs],
        segments: list[Segment],
        refs: list["WindowRef"] | None = None,
    ):
        """Maxima over the registry and (optionally only the listed) windows."""
        stay = 1.0
        if refs is None:
            states = (st for seg in segments for st in seg.states)
        else:
            states = (segments[r.segment].states[r.t] for r in refs)
        for st in states:
            stay = max(stay, max(st.staytimes, default=1))
        return cls(
            size_max=float(max(a.size_class for a in registry.values())),
            carrier_max=float(max(a.carrier_code for a in registry.values())),
            stay_max=float(stay),
        )

    def to_json(self) -> dict:
        return {
            "size_max": self.size_max,
            "carrier_max": self.carrier_max,
            "stay_max": self.stay_max,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "FeatureScales":
        return cls(**payload)


def state_features(
    state: PortState, registry: dict[int, VesselAttrs], scales: FeatureScales
) -> np.ndarray:
    """Per-slot (size, carrier, staytime) triples, normalized, empty slots zero."""
    lay = state.layout
    out = np.zeros(lay.n_slots * N_STATE_FEATURES, dtype=np.float64)
    for i, imo in enumerate(state.slots):
        if imo == 0:
            continue
        attrs = registry[imo]
        base = i * N_STATE_FEATURES
        out[base] = attrs.size_class / scales.size_max
        out[base + 1] = attrs.carrier_code / scales.carrier_max
        out[base + 2] = min(state.staytimes[i] / scales.stay_max, 1.0)
    return out


def segment_feature_matrix(
    seg: Segment, registry: dict[int, VesselAttrs], scales: FeatureScales
) -> np.ndarray:
    return np.vstack(
        [state_features(st, registry, scales) for st in seg.states]
    )


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowRef:
    """Points at one decision window inside a segment list."""

    segment: int
    t: int


def split_windows(segments: list[Segment], ratio: float = 0.8):
    """Chronological split of all decision windows into train and test refs."""
    refs = [
        WindowRef(segment=si, t=t)
        for si, seg in enumerate(segments)
        for t in range(seg.n_steps)
    ]
    n_train = int(math.floor(ratio * len(refs)))
    return refs[:n_train], refs[n_train:]


def legal_wire_indices(state: PortState, slot: int) -> tuple[int, ...]:
    return tuple(sorted(int(a) for a in legal_actions(state, slot)))


def build_factored_samples(
    segments: list[Segment],
    feature_mats: list[np.ndarray],
    temporal_mats: list[np.ndarray] | None,
    refs: list[WindowRef],
):
    """Assemble factored training samples for the listed decision windows."""
    from .irl import FactoredSample

    samples = []
    for ref in refs:
        seg = segments[ref.segment]
        state = seg.states[ref.t]
        if temporal_mats is None:
            temporal = np.zeros(0)
        else:
            temporal = temporal_mats[ref.segment][ref.t]
        samples.append(
            FactoredSample(
                features=feature_mats[ref.segment][ref.t],
                temporal=temporal,
                legal=tuple(
                    legal_wire_indices(state, i) for i in range(state.layout.n_slots)
                ),
                chosen=tuple(int(a) for a in seg.actions[ref.t].actions),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def action_frequencies(segments: list[Segment]) -> list[dict]:
    """Relative frequency of each non-idle sub-action across all windows."""
    counts = {a: 0 for a in SlotAction if a is not SlotAction.NOTHING}
    for seg in segments:
        for ja in seg.actions:
            for a in ja.actions:
                if a is not SlotAction.NOTHING:
                    counts[a] += 1
    total = sum(counts.values())
    return [
        {
            "action": a.name,
            "wire_index": int(a),
            "count": counts[a],
            "frequency": counts[a] / total if total else 0.0,
        }
        for a in sorted(counts)
    ]


def stay_histogram(visits: list[VisitRecord], layout: PortLayout = DEFAULT_LAYOUT):
    """Histogram of total windows in port per visit, with log10 counts."""
    counts: dict[int, int] = {}
    for rec in visits:
        zones = visit_zone_windows(rec, layout)
        n = sum(len(ws) for ws in zones.values())
        counts[n] = counts.get(n, 0) + 1
    return [
        {
            "stay_windows": k,
            "count": counts[k],
            "log10_count": math.log10(counts[k]),
        }
        for k in sorted(counts)
    ]


def write_stats_csvs(freq_path, hist_path, segments, visits, layout=DEFAULT_LAYOUT):
    with open(freq_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["action", "wire_index", "count", "frequency"])
        for row in action_frequencies(segments):
            writer.writerow(
                [row["action"], row["wire_index"], row["count"], repr(row["frequency"])]
            )
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stay_windows", "count", "log10_count"])
        for row in stay_histogram(visits, layout):
            writer.writerow(
                [row["stay_windows"], row["count"], repr(row["log10_count"])]
            )


# ---------------------------------------------------------------------------
# Trajectory CSV round-trip
# ---------------------------------------------------------------------------


def write_trajectory_csv(path, segments: list[Segment]) -> None:
    """One row per (window, slot); final windows carry action index 0."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window", "slot", "imo", "action_index"])
        for seg in segments:
            for t, state in enumerate(seg.states):
                final = t == len(seg.states) - 1
                for i in range(state.layout.n_slots):
                    act = 0 if final else int(seg.actions[t].actions[i])
                    writer.writerow([state.window, i, state.slots[i], act])


def read_trajectory_csv(path, layout: PortLayout = DEFAULT_LAYOUT) -> list[Segment]:
    """Rebuild segments from the per-slot rows and re-verify every transition.

    Staytimes are not stored; they are reconstructed by tracking each
    vessel's zone stints (a segment always opens with fresh arrivals).
    """
    per_window: dict[int, dict[int, tuple[int, int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["window", "slot", "imo", "action_index"]:
            raise PipelineError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                w, slot, imo, act = (int(v) for v in row)
            except ValueError as exc:
                raise PipelineError(f"{path}:{lineno}: {exc}") from None
            per_window.setdefault(w, {})[slot] = (imo, act)

    windows = sorted(per_window)
    segments: list[Segment] = []
    run: list[int] = []
    for w in windows:
        if len(per_window[w]) != layout.n_slots:
            raise PipelineError(f"window {w}: expected {layout.n_slots} slot rows")
        if run and w != run[-1] + 1:
            segments.append(_rebuild_segment(run, per_window, layout))
            run = []
        run.append(w)
    if run:
        segments.append(_rebuild_segment(run, per_window, layout))
    return segments


def _rebuild_segment(windows, per_window, layout) -> Segment:
    states: list[PortState] = []
    actions: list[JointAction] = []
    arrivals: list[list[ArrivalEvent]] = [[]]
    prev: PortState | None = None
    for w in windows:
        rows = per_window[w]
        slots = tuple(rows[i][0] for i in range(layout.n_slots))
        stays = [0] * layout.n_slots
        for i, imo in enumerate(slots):
            if imo == 0:
                continue
            zone = layout.zone_of(i)
            if prev is None:
                if zone is not Zone.INCOMING:
                    raise PipelineError(
                        f"window {w}: vessel {imo} opens a segment outside incoming"
                    )
                stays[i] = 1
                continue
            prev_slot = prev.find_vessel(imo)
            if prev_slot is None:
                stays[i] = 1
            elif zone is Zone.BERTH and prev_slot == i:
                stays[i] = prev.staytimes[prev_slot] + 1
            elif zone is Zone.WAITING and layout.zone_of(prev_slot) is Zone.WAITING:
                stays[i] = prev.staytimes[prev_slot] + 1
            else:
                stays[i] = 1
        state = PortState(
            slots=slots, window=w, staytimes=tuple(stays), layout=layout
        )
        if prev is not None:
            new_arrivals = [
                ArrivalEvent(imo=state.slots[i], window=w)
                for i in layout.incoming_slots
                if state.slots[i] != 0 and prev.find_vessel(state.slots[i]) is None
            ]
            arrivals.append(new_arrivals)
        acts = [rows[i][1] for i in range(layout.n_slots)]
        if w != windows[-1]:
            actions.append(JointAction(actions=tuple(SlotAction(a) for a in acts)))
        elif any(acts):
            raise PipelineError(f"window {w}: final window must carry action index 0")
        states.append(state)
        prev = state
    seg = Segment(
        start_window=windows[0], states=states, actions=actions, arrivals=arrivals
    )
    _verify_replay(seg)
    return seg


def save_scales(path, scales: FeatureScales) -> None:
    with open(path, "w") as fh:
        json.dump(scales.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scales(path) -> FeatureScales:
    with open(path) as fh:
        return FeatureScales.from_json(json.load(fh))
