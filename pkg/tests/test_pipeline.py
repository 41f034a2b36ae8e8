import numpy as np
import pytest

from portirl.model import (
    DEFAULT_LAYOUT,
    VesselAttrs,
    WINDOW_SECONDS,
    apply_transition,
)
from portirl.pipeline import (
    FeatureScales,
    PipelineError,
    Segment,
    VisitRecord,
    action_frequencies,
    build_factored_samples,
    discretize,
    load_registry,
    load_scales,
    load_visits,
    read_trajectory_csv,
    save_scales,
    segment_feature_matrix,
    split_windows,
    state_features,
    stay_histogram,
    write_stats_csvs,
    write_trajectory_csv,
)
from portirl.synth import generate_dataset, write_registry_csv, write_visits_csv

WS = WINDOW_SECONDS


def visit(imo, arrive_w, wait_n, serve_n, berth_id):
    """Build a consistent visit: incoming one window, then waiting, then berth."""
    waiting_enter = (arrive_w + 1) * WS
    berth_enter = waiting_enter + wait_n * WS
    return VisitRecord(
        imo=imo,
        arrival_ts=arrive_w * WS + 50,
        waiting_enter_ts=waiting_enter,
        waiting_exit_ts=berth_enter,
        berth_enter_ts=berth_enter,
        berth_exit_ts=berth_enter + serve_n * WS,
        berth_id=berth_id,
    )


def write_rows(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


VISIT_HEADER = [
    "imo",
    "arrival_ts",
    "waiting_enter_ts",
    "waiting_exit_ts",
    "berth_enter_ts",
    "berth_exit_ts",
    "berth_id",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A moderate synthetic run, round-tripped through its CSV exports."""
    root = tmp_path_factory.mktemp("data")
    res = generate_dataset(n_windows=120, seed=21)
    write_visits_csv(root / "visits.csv", res.visits)
    write_registry_csv(root / "registry.csv", res.registry)
    visits = load_visits(root / "visits.csv")
    registry = load_registry(root / "registry.csv")
    return res, visits, registry


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------


def test_visits_survive_csv_round_trip(dataset):
    res, visits, registry = dataset
    assert len(visits) == len(res.visits)
    for got, want in zip(visits, res.visits):
        assert got.imo == want.imo
        assert got.arrival_ts == want.arrival_ts
        assert got.berth_exit_ts == want.berth_exit_ts
    assert registry == res.registry


def test_load_visits_rejects_wrong_header(tmp_path):
    p = tmp_path / "visits.csv"
    write_rows(p, ["imo", "when"], [[1, 2]])
    with pytest.raises(PipelineError, match="header"):
        load_visits(p)


def test_load_visits_names_bad_line(tmp_path):
    p = tmp_path / "visits.csv"
    good = visit(11, 0, 1, 2, 1)
    write_rows(
        p,
        VISIT_HEADER,
        [
            [good.imo, good.arrival_ts, good.waiting_enter_ts, good.waiting_exit_ts,
             good.berth_enter_ts, good.berth_exit_ts, good.berth_id],
            [12, 100, "soon", 2, 3, 4, 1],
        ],
    )
    with pytest.raises(PipelineError, match=r":3:"):
        load_visits(p)


def test_load_visits_rejects_field_count(tmp_path):
    p = tmp_path / "visits.csv"
    write_rows(p, VISIT_HEADER, [[11, 100, 200]])
    with pytest.raises(PipelineError, match=r":2: expected 7 fields"):
        load_visits(p)


def test_load_visits_rejects_unordered_timestamps(tmp_path):
    p = tmp_path / "visits.csv"
    rec = visit(11, 2, 1, 2, 1)
    write_rows(
        p,
        VISIT_HEADER,
        [[rec.imo, rec.arrival_ts, rec.waiting_enter_ts, rec.waiting_exit_ts,
          rec.berth_enter_ts, rec.waiting_enter_ts, rec.berth_id]],
    )
    with pytest.raises(PipelineError, match="out of order"):
        load_visits(p)


def test_load_visits_rejects_nonpositive_imo(tmp_path):
    p = tmp_path / "visits.csv"
    rec = visit(11, 0, 1, 2, 1)
    write_rows(
        p,
        VISIT_HEADER,
        [[0, rec.arrival_ts, rec.waiting_enter_ts, rec.waiting_exit_ts,
          rec.berth_enter_ts, rec.berth_exit_ts, rec.berth_id]],
    )
    with pytest.raises(PipelineError, match="imo must be positive"):
        load_visits(p)


def test_load_registry_rejects_duplicates(tmp_path):
    p = tmp_path / "registry.csv"
    write_rows(
        p,
        ["imo", "size_class", "carrier_code"],
        [[11, 2, 3], [11, 1, 1]],
    )
    with pytest.raises(PipelineError, match=r":3: duplicate vessel 11"):
        load_registry(p)


def test_load_registry_rejects_zero_size(tmp_path):
    p = tmp_path / "registry.csv"
    write_rows(p, ["imo", "size_class", "carrier_code"], [[11, 0, 3]])
    with pytest.raises(PipelineError, match="size_class"):
        load_registry(p)


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


def test_discretize_reconstructs_generator_states(dataset):
    res, visits, registry = dataset
    segments = discretize(visits, registry)
    assert segments
    covered = 0
    for seg in segments:
        for t, state in enumerate(seg.states):
            assert state.window == seg.start_window + t
            assert state == res.states[state.window]
            covered += 1
        for t, ja in enumerate(seg.actions):
            assert ja == res.actions[seg.start_window + t]
    assert covered > 0


def test_discretize_replays_through_transitions(dataset):
    res, visits, registry = dataset
    for seg in discretize(visits, registry):
        for t in range(seg.n_steps):
            nxt = apply_transition(
                seg.states[t], seg.actions[t], tuple(seg.arrivals[t + 1])
            )
            assert nxt == seg.states[t + 1]


def test_discretize_requires_registered_vessels():
    with pytest.raises(PipelineError, match="missing from the registry"):
        discretize([visit(11, 0, 1, 2, 1)], {})


def test_discretize_rejects_berth_double_booking():
    registry = {11: VesselAttrs(2, 1), 12: VesselAttrs(1, 1)}
    rows = [visit(11, 0, 0, 3, 1), visit(12, 1, 0, 2, 1)]  # both on berth 1
    with pytest.raises(PipelineError, match=r"window \d+: berth 1 holds both"):
        discretize(rows, registry)


def test_discretize_rejects_overlapping_visits_of_same_vessel():
    registry = {11: VesselAttrs(2, 1)}
    rows = [visit(11, 0, 1, 4, 1), visit(11, 2, 1, 2, 2)]
    with pytest.raises(PipelineError, match="overlapping visits"):
        discretize(rows, registry)


def test_prune_gap_splits_idle_stretches():
    registry = {11: VesselAttrs(2, 1), 12: VesselAttrs(1, 2)}
    far_apart = [visit(11, 0, 1, 2, 1), visit(12, 60, 1, 2, 1)]
    segments = discretize(far_apart, registry, prune_gap=10)
    assert len(segments) == 2
    merged = discretize(far_apart, registry, prune_gap=100)
    assert len(merged) == 1


def test_segments_end_with_an_empty_port(dataset):
    res, visits, registry = dataset
    for seg in discretize(visits, registry):
        assert seg.states[-1].vessels() == set()
        assert seg.arrivals[0] == []


# ---------------------------------------------------------------------------
# trajectory CSV
# ---------------------------------------------------------------------------


def test_trajectory_csv_round_trip(tmp_path, dataset):
    res, visits, registry = dataset
    segments = discretize(visits, registry)
    path = tmp_path / "trajectory.csv"
    write_trajectory_csv(path, segments)
    loaded = read_trajectory_csv(path)
    assert len(loaded) == len(segments)
    for got, want in zip(loaded, segments):
        assert got.start_window == want.start_window
        assert got.states == want.states
        assert got.actions == want.actions
        assert got.arrivals == want.arrivals


def test_trajectory_csv_rejects_wrong_header(tmp_path):
    p = tmp_path / "trajectory.csv"
    write_rows(p, ["window", "slot"], [[0, 0]])
    with pytest.raises(PipelineError, match="header"):
        read_trajectory_csv(p)


def test_trajectory_csv_rejects_missing_slots(tmp_path):
    p = tmp_path / "trajectory.csv"
    write_rows(
        p,
        ["window", "slot", "imo", "action_index"],
        [[0, i, 0, 0] for i in range(5)],
    )
    with pytest.raises(PipelineError, match="slot rows"):
        read_trajectory_csv(p)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def test_feature_scales_take_data_maxima(dataset):
    res, visits, registry = dataset
    segments = discretize(visits, registry)
    scales = FeatureScales.from_data(registry, segments)
    assert scales.size_max == max(a.size_class for a in registry.values())
    assert scales.carrier_max == max(a.carrier_code for a in registry.values())
    longest = max(max(st.staytimes) for seg in segments for st in seg.states)
    assert scales.stay_max == longest


def test_feature_scales_respect_window_subset(dataset):
    res, visits, registry = dataset
    segments = discretize(visits, registry)
    train_refs, _ = split_windows(segments, ratio=0.5)
    sub = FeatureScales.from_data(registry, segments, refs=train_refs)
    full = FeatureScales.from_data(registry, segments)
    assert sub.stay_max <= full.stay_max
    assert sub.size_max == full.size_max


def test_feature_scales_json_round_trip(tmp_path):
    scales = FeatureScales(size_max=4.0, carrier_max=5.0, stay_max=9.0)
    path = tmp_path / "scales.json"
    save_scales(path, scales)
    assert load_scales(path) == scales


def test_state_features_layout(dataset):
    res, visits, registry = dataset
    segments = discretize(visits, registry)
    scales = FeatureScales.from_data(registry, segments)
    state = next(
        st for seg in segments for st in seg.states if st.vessels()
    )
    vec = state_features(state, registry, scales)
    assert vec.shape == (57,)
    assert vec.min() >= 0.0 and vec.max() <= 1.0
    for i, imo in enumerate(state.slots):
        block = vec[3 * i : 3 * (i + 1)]
        if imo == 0:
            assert np.all(block == 0.0)
        else:
            assert block[0] == registry[imo].size_class / scales.size_max
            assert block[2] > 0.0


def test_segment_feature_matrix_shape(dataset):
    res, visits, registry = dataset
    segments = discretize(visits, registry)
    scales = FeatureScales.from_data(registry, segments)
    mat = segment_feature_matrix(segments[0], registry, scales)
    assert mat.shape == (len(segments[0].states), 57)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


def test_split_windows_is_chronological(dataset):
    res, visits, registry = dataset
    segments = discretize(visits, registry)
    train_refs, test_refs = split_windows(segments, ratio=0.8)
    total = sum(seg.n_steps for seg in segments)
    assert len(train_refs) + len(test_refs) == total
    assert len(train_refs) == int(0.8 * total)
    ordering = [(r.segment, r.t) for r in train_refs + test_refs]
    assert ordering == sorted(ordering)


def test_build_factored_samples_agree_with_states(dataset):
    res, visits, registry = dataset
    segments = discretize(visits, registry)
    scales = FeatureScales.from_data(registry, segments)
    mats = [segment_feature_matrix(seg, registry, scales) for seg in segments]
    refs, _ = split_windows(segments, ratio=0.5)
    samples = build_factored_samples(segments, mats, None, refs)
    assert len(samples) == len(refs)
    for ref, sample in zip(refs, samples):
        seg = segments[ref.segment]
        assert sample.temporal.shape == (0,)
        assert np.array_equal(sample.features, mats[ref.segment][ref.t])
        for slot, (legal, chosen) in enumerate(
            zip(sample.legal, sample.chosen)
        ):
            assert chosen in legal
            assert chosen == int(seg.actions[ref.t].actions[slot])


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def test_action_frequencies_sum_to_one(dataset):
    res, visits, registry = dataset
    rows = action_frequencies(discretize(visits, registry))
    assert [r["action"] for r in rows[:2]] == ["STAY", "GO_TO_WAITING"]
    assert sum(r["frequency"] for r in rows) == pytest.approx(1.0)
    assert all(r["count"] >= 0 for r in rows)


def test_stay_histogram_counts_visits(dataset):
    res, visits, registry = dataset
    rows = stay_histogram(visits)
    assert sum(r["count"] for r in rows) == len(visits)
    for r in rows:
        assert r["log10_count"] == pytest.approx(np.log10(r["count"]))


def test_stats_csvs_have_headers(tmp_path, dataset):
    res, visits, registry = dataset
    segments = discretize(visits, registry)
    freq, hist = tmp_path / "freq.csv", tmp_path / "hist.csv"
    write_stats_csvs(freq, hist, segments, visits)
    assert freq.read_text().splitlines()[0] == "action,wire_index,count,frequency"
    assert hist.read_text().splitlines()[0] == "stay_windows,count,log10_count"
