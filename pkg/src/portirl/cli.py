"""Command-line pipeline from raw visit logs to evaluation reports.

Subcommands chain through a shared output directory, each recording what it
read and wrote (with content hashes) in ``run.json``:

    synth -> ingest -> stats -> train-ae -> extract -> train-irl
          -> predict -> evaluate

``gradcheck`` is a self-contained numerical audit of both gradient stacks.
Every command accepts ``--config`` (flat ``key=value`` lines), ``--seed``
and ``--out``; command-line flags beat config entries, which beat built-in
defaults. Exit codes: 0 success, 1 data or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import forecast, irl, lstm_ae, manifest, pipeline, synth
from .model import TransitionError, InvalidStateError, encode_action

WINDOW_HOURS = 8


class MissingArtifact(FileNotFoundError):
    """An upstream output this command depends on does not exist."""


# ---------------------------------------------------------------------------
# Configuration file
# ---------------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Flat key=value settings; blank lines and # comments are skipped."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


class Settings:
    """Resolved configuration: flag > config file > default."""

    def __init__(self, args):
        self.values = read_config(args.config) if args.config else {}
        self.used: dict[str, str] = {}

    def get(self, key: str, default, cast=str, flag=None):
        if flag is not None:
            value = cast(flag)
        elif key in self.values:
            value = cast(self.values[key])
        else:
            value = default
        self.used[key] = str(value)
        return value


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in str(text).split(","))


# ---------------------------------------------------------------------------
# Shared artifact plumbing
# ---------------------------------------------------------------------------


def _out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _need(out_dir: str, name: str, producer: str) -> str:
    path = os.path.join(out_dir, name)
    if not os.path.exists(path):
        raise MissingArtifact(f"missing artifact {name} — run `{producer}` first")
    return path


def _load_segments(out_dir):
    return pipeline.read_trajectory_csv(_need(out_dir, "trajectory.csv", "ingest"))


def _load_registry(out_dir):
    return pipeline.load_registry(_need(out_dir, "registry.csv", "synth or ingest"))


def _split(settings, segments, flag=None):
    ratio = settings.get("split.ratio", 0.8, float, flag)
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split.ratio must lie strictly between 0 and 1, got {ratio}")
    return pipeline.split_windows(segments, ratio)


def _feature_matrices(segments, registry, scales):
    return [
        pipeline.segment_feature_matrix(seg, registry, scales) for seg in segments
    ]


def _read_temporal(path, segments) -> list[np.ndarray]:
    """Match extracted feature rows back to segments by window number."""
    import csv

    by_window: dict[int, np.ndarray] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "window":
            raise pipeline.PipelineError(f"{path}: unexpected header {header}")
        for row in reader:
            by_window[int(row[0])] = np.array([float(v) for v in row[1:]])
    mats = []
    for seg in segments:
        try:
            mats.append(np.stack([by_window[st.window] for st in seg.states]))
        except KeyError as exc:
            raise pipeline.PipelineError(
                f"{path}: no features for window {exc.args[0]}; rerun extract"
            ) from None
    return mats


def _train_sequences(segments, feature_mats, train_refs):
    """Per-segment feature/target prefixes covering only training windows."""
    last_train: dict[int, int] = {}
    for ref in train_refs:
        last_train[ref.segment] = max(last_train.get(ref.segment, -1), ref.t)
    seqs = []
    for si in sorted(last_train):
        seg = segments[si]
        upto = last_train[si]
        xs = feature_mats[si][: upto + 1]
        ys = np.stack([encode_action(seg.actions[t]) for t in range(upto + 1)])
        seqs.append((xs, ys))
    return seqs


def _policy(out_dir, registry):
    scales = pipeline.load_scales(_need(out_dir, "scales.json", "train-ae"))
    ae_params, ae_config = lstm_ae.load_checkpoint(
        _need(out_dir, "ae.json", "train-ae")
    )
    reward_config, model, _ = irl.load_checkpoint(
        _need(out_dir, "reward.json", "train-irl")
    )
    if reward_config.mode != "factored":
        raise ValueError("reward checkpoint is not a factored-port model")
    return forecast.LearnedPolicy(model, registry, scales, ae_params, ae_config)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, settings: Settings) -> int:
    out = _out(args)
    vessels = settings.get("fleet.vessels", 40, int, args.vessels)
    horizon = settings.get("synth.horizon", 400, int, args.horizon)
    fleet = synth.FleetConfig(
        n_vessels=vessels,
        n_size_classes=settings.get("fleet.size_classes", 4, int),
        n_carriers=settings.get("fleet.carriers", 5, int),
        arrival_prob=settings.get("fleet.arrival_prob", 0.28, float),
        cooldown_windows=settings.get("fleet.cooldown", 2, int),
    )
    rule = synth.ExpertRule(
        w_size=settings.get("rule.w_size", 1.0, float),
        w_carrier=settings.get("rule.w_carrier", 0.5, float),
        w_staytime=settings.get("rule.w_staytime", 2.0, float),
        service_by_size=settings.get("rule.service_by_size", (1, 2, 2, 3), _ints),
    )
    if fleet.n_size_classes > len(rule.service_by_size):
        raise ValueError(
            f"rule.service_by_size lists {len(rule.service_by_size)} durations "
            f"but the fleet has {fleet.n_size_classes} size classes"
        )
    result = synth.generate_dataset(fleet, rule, n_windows=horizon, seed=args.seed)
    paths = [os.path.join(out, n) for n in ("visits.csv", "registry.csv", "arrivals.csv")]
    synth.write_visits_csv(paths[0], result.visits)
    synth.write_registry_csv(paths[1], result.registry)
    synth.write_arrivals_csv(paths[2], result.arrivals)
    manifest.record(out, "synth", args.seed, settings.used, [], paths)
    print(f"synth: {len(result.visits)} visits over {horizon} windows -> {out}")
    return 0


def cmd_ingest(args, settings: Settings) -> int:
    out = _out(args)
    visits_path = args.visits or _need(out, "visits.csv", "synth")
    registry_path = args.registry or _need(out, "registry.csv", "synth")
    visits = pipeline.load_visits(visits_path)
    registry = pipeline.load_registry(registry_path)
    prune_gap = settings.get("ingest.prune_gap", pipeline.PRUNE_GAP_WINDOWS, int)
    segments = pipeline.discretize(visits, registry, prune_gap=prune_gap)
    traj_path = os.path.join(out, "trajectory.csv")
    pipeline.write_trajectory_csv(traj_path, segments)
    freq_path = os.path.join(out, "action_freq.csv")
    hist_path = os.path.join(out, "stay_hist.csv")
    pipeline.write_stats_csvs(freq_path, hist_path, segments, visits)
    manifest.record(
        out,
        "ingest",
        args.seed,
        settings.used,
        [visits_path, registry_path],
        [traj_path, freq_path, hist_path],
    )
    windows = sum(len(seg.states) for seg in segments)
    print(f"ingest: {len(segments)} segment(s), {windows} windows -> {traj_path}")
    return 0


def cmd_stats(args, settings: Settings) -> int:
    out = _out(args)
    traj_path = _need(out, "trajectory.csv", "ingest")
    visits_path = args.visits or _need(out, "visits.csv", "synth")
    segments = pipeline.read_trajectory_csv(traj_path)
    visits = pipeline.load_visits(visits_path)
    freq_path = os.path.join(out, "action_freq.csv")
    hist_path = os.path.join(out, "stay_hist.csv")
    pipeline.write_stats_csvs(freq_path, hist_path, segments, visits)
    manifest.record(
        out,
        "stats",
        args.seed,
        settings.used,
        [traj_path, visits_path],
        [freq_path, hist_path],
    )
    print(f"stats: wrote {freq_path} and {hist_path}")
    return 0


def cmd_train_ae(args, settings: Settings) -> int:
    out = _out(args)
    segments = _load_segments(out)
    registry = _load_registry(out)
    train_refs, _ = _split(settings, segments)
    scales = pipeline.FeatureScales.from_data(registry, segments, refs=train_refs)
    feature_mats = _feature_matrices(segments, registry, scales)
    config = lstm_ae.LSTMAEConfig(
        hidden_dim=settings.get("ae.hidden_dim", 64, int),
        bottleneck_dim=settings.get("ae.bottleneck_dim", 32, int),
        recon_weight=settings.get("ae.recon_weight", 0.1, float),
        learning_rate=settings.get("ae.learning_rate", 0.05, float),
        iterations=settings.get("ae.iterations", 500, int),
        clip_norm=settings.get("ae.clip_norm", 5.0, float),
        seed=args.seed,
    )
    seqs = _train_sequences(segments, feature_mats, train_refs)
    params, history = lstm_ae.train(seqs, config)
    scales_path = os.path.join(out, "scales.json")
    ae_path = os.path.join(out, "ae.json")
    hist_path = os.path.join(out, "ae_history.csv")
    pipeline.save_scales(scales_path, scales)
    lstm_ae.save_checkpoint(ae_path, params, config)
    lstm_ae.write_history_csv(hist_path, history)
    manifest.record(
        out,
        "train-ae",
        args.seed,
        settings.used,
        [os.path.join(out, "trajectory.csv"), os.path.join(out, "registry.csv")],
        [scales_path, ae_path, hist_path],
    )
    final = history[-1]
    print(
        f"train-ae: {config.iterations} iteration(s), objective "
        f"{final['objective']:.4f}, bce/entry {final['bce_per_entry']:.4f}"
    )
    return 0


def cmd_extract(args, settings: Settings) -> int:
    out = _out(args)
    segments = _load_segments(out)
    registry = _load_registry(out)
    scales = pipeline.load_scales(_need(out, "scales.json", "train-ae"))
    params, config = lstm_ae.load_checkpoint(_need(out, "ae.json", "train-ae"))
    feature_mats = _feature_matrices(segments, registry, scales)
    rows: list[tuple[int, np.ndarray]] = []
    for seg, mat in zip(segments, feature_mats):
        feats = lstm_ae.extract_features(params, mat, config)
        rows.extend((st.window, feats[t]) for t, st in enumerate(seg.states))
    temporal_path = os.path.join(out, "temporal.csv")
    lstm_ae.write_features_csv(temporal_path, rows)
    manifest.record(
        out,
        "extract",
        args.seed,
        settings.used,
        [os.path.join(out, "ae.json"), os.path.join(out, "trajectory.csv")],
        [temporal_path],
    )
    print(f"extract: {len(rows)} window feature vector(s) -> {temporal_path}")
    return 0


def cmd_train_irl(args, settings: Settings) -> int:
    out = _out(args)
    segments = _load_segments(out)
    registry = _load_registry(out)
    scales = pipeline.load_scales(_need(out, "scales.json", "train-ae"))
    temporal_path = _need(out, "temporal.csv", "extract")
    temporal_mats = _read_temporal(temporal_path, segments)
    train_refs, _ = _split(settings, segments)
    feature_mats = _feature_matrices(segments, registry, scales)
    samples = pipeline.build_factored_samples(
        segments, feature_mats, temporal_mats, train_refs
    )
    lr_text = settings.get("irl.learning_rate", "default")
    config = irl.IRLConfig(
        mode="factored",
        reward_form=settings.get("irl.reward_form", "linear"),
        learning_rate=None if lr_text == "default" else float(lr_text),
        fit_iterations=settings.get("irl.fit_iterations", 200, int),
        mlp_hidden=settings.get("irl.mlp_hidden", 32, int),
        v_definition=settings.get("irl.v_definition", "expected_q"),
        seed=args.seed,
    )
    result = irl.fit_factored(samples, config)
    reward_path = os.path.join(out, "reward.json")
    hist_path = os.path.join(out, "irl_history.csv")
    irl.save_checkpoint(reward_path, result, extra={"n_samples": len(samples)})
    irl.write_history_csv(hist_path, result.history)
    manifest.record(
        out,
        "train-irl",
        args.seed,
        settings.used,
        [
            os.path.join(out, "trajectory.csv"),
            os.path.join(out, "scales.json"),
            temporal_path,
        ],
        [reward_path, hist_path],
    )
    print(
        f"train-irl: {config.reward_form} reward, best mean log-likelihood "
        f"{result.best_ll_mean:.4f} over {len(samples)} windows"
    )
    return 0


def cmd_predict(args, settings: Settings) -> int:
    import csv

    out = _out(args)
    segments = _load_segments(out)
    registry = _load_registry(out)
    policy = _policy(out, registry)
    _, test_refs = _split(settings, segments)
    rule = settings.get("predict.rule", "argmax")
    rng = np.random.default_rng(args.seed)
    test_set = {(r.segment, r.t) for r in test_refs}
    rows = []
    for si, seg in enumerate(segments):
        carry = policy.begin()
        for t in range(seg.n_steps):
            state = seg.states[t]
            dists, carry = policy.step(state, carry)
            if (si, t) not in test_set:
                continue
            predicted = forecast.decide_joint(state, dists, rule, rng)
            for i in range(state.layout.n_slots):
                if state.slots[i] == 0:
                    continue
                rows.append(
                    [
                        state.window,
                        i,
                        state.slots[i],
                        int(seg.actions[t].actions[i]),
                        int(predicted.actions[i]),
                    ]
                )
    pred_path = os.path.join(out, "predictions.csv")
    with open(pred_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window", "slot", "imo", "actual", "predicted"])
        writer.writerows(rows)
    manifest.record(
        out,
        "predict",
        args.seed,
        settings.used,
        [
            os.path.join(out, "trajectory.csv"),
            os.path.join(out, "registry.csv"),
            os.path.join(out, "scales.json"),
            os.path.join(out, "ae.json"),
            os.path.join(out, "reward.json"),
        ],
        [pred_path],
    )
    print(f"predict: {len(rows)} slot prediction(s) -> {pred_path}")
    return 0


def cmd_evaluate(args, settings: Settings) -> int:
    out = _out(args)
    segments = _load_segments(out)
    registry = _load_registry(out)
    policy = _policy(out, registry)
    train_refs, test_refs = _split(settings, segments)
    report, plots = forecast.evaluate(
        policy,
        segments,
        test_refs,
        train_refs,
        departure_horizon=settings.get("eval.departure_horizon", 60, int),
        rule=settings.get("eval.rule", "argmax"),
        seed=args.seed,
    )
    report_path = os.path.join(out, "report.json")
    cong_path = os.path.join(out, "congestion_plot.csv")
    dep_path = os.path.join(out, "departures_plot.csv")
    forecast.write_report_json(report_path, report)
    forecast.write_plot_csvs(cong_path, dep_path, plots)
    manifest.record(
        out,
        "evaluate",
        args.seed,
        settings.used,
        [
            os.path.join(out, "trajectory.csv"),
            os.path.join(out, "registry.csv"),
            os.path.join(out, "scales.json"),
            os.path.join(out, "ae.json"),
            os.path.join(out, "reward.json"),
        ],
        [report_path, cong_path, dep_path],
    )

    def show(value):
        return "n/a" if value is None else f"{value:.4f}"

    print(
        "evaluate: action {} (baseline {}), congestion {} (baseline {}), "
        "departure exact {}".format(
            show(report.action_accuracy),
            show(report.baseline_action_accuracy),
            show(report.congestion_accuracy),
            show(report.baseline_congestion_accuracy),
            show(report.departure_exact),
        )
    )
    return 0


def cmd_gradcheck(args, settings: Settings) -> int:
    import json

    out = _out(args)
    n_samples = settings.get("gradcheck.samples", 200, int)
    ae_err, _ = lstm_ae.gradient_check(seed=args.seed, n_samples=n_samples)
    ae_control, _ = lstm_ae.gradient_check(
        seed=args.seed, n_samples=n_samples, corrupt=True
    )

    mdp = synth.enumerate_toy_mdp()
    rng = np.random.default_rng(args.seed)
    theta = 0.7 * rng.standard_normal(mdp.phi.shape[1])
    config = irl.IRLConfig(mode="exact")
    values = irl.soft_value_iteration(mdp, mdp.phi @ theta, config)
    policy = irl.exact_policy(mdp, values)
    trajs = synth.toy_sample_trajectories(mdp, policy, 5, 10, seed=args.seed)
    _, grad = irl.exact_grad_log_likelihood(mdp, theta, trajs, config)
    eps = 1e-6
    irl_err = 0.0
    for j in range(len(theta)):
        up, down = theta.copy(), theta.copy()
        up[j] += eps
        down[j] -= eps
        ll_up, _ = irl.exact_grad_log_likelihood(mdp, up, trajs, config)
        ll_down, _ = irl.exact_grad_log_likelihood(mdp, down, trajs, config)
        fd = (ll_up - ll_down) / (2 * eps)
        irl_err = max(irl_err, abs(fd - grad[j]) / max(1.0, abs(fd)))

    ok = bool(ae_err < 1e-5 and ae_control > 1e-2 and irl_err < 1e-5)
    payload = {
        "ae_max_rel_err": float(ae_err),
        "ae_negative_control": float(ae_control),
        "irl_max_rel_err": float(irl_err),
        "passed": ok,
    }
    check_path = os.path.join(out, "gradcheck.json")
    with open(check_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.record(out, "gradcheck", args.seed, settings.used, [], [check_path])
    print(
        f"gradcheck: autoencoder {ae_err:.2e} (control {ae_control:.2e}), "
        f"reward gradient {irl_err:.2e} -> {'ok' if ok else 'FAILED'}"
    )
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="portirl",
        description="Berth-scheduling imitation pipeline.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value settings file")
    common.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    common.add_argument(
        "--out", default="runs/latest", help="output directory (default runs/latest)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--vessels", type=int, help="fleet size (default 40)")
    p.add_argument("--horizon", type=int, help="arrival windows (default 400)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="discretize visit logs")
    p.add_argument("--visits", help="visits CSV (default <out>/visits.csv)")
    p.add_argument("--registry", help="registry CSV (default <out>/registry.csv)")
    p.add_argument(
        "--window-hours",
        type=float,
        default=WINDOW_HOURS,
        help="discretization window length in hours (fixed grid: 8)",
    )
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", parents=[common], help="recompute dataset statistics")
    p.add_argument("--visits", help="visits CSV (default <out>/visits.csv)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train-ae", parents=[common], help="train the temporal encoder")
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("extract", parents=[common], help="extract temporal features")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-irl", parents=[common], help="fit the reward model")
    p.set_defaults(func=cmd_train_irl)

    p = sub.add_parser("predict", parents=[common], help="predict held-out actions")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score the fitted model")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="audit both gradient stacks")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "synth":
        if args.vessels is not None and args.vessels < 1:
            parser.error("--vessels must be at least 1")
        if args.horizon is not None and args.horizon < 1:
            parser.error("--horizon must be at least 1")
    if args.command == "ingest" and args.window_hours != WINDOW_HOURS:
        parser.error(
            f"only the {WINDOW_HOURS}-hour discretization grid is supported"
        )

    try:
        settings = Settings(args)
    except (OSError, ValueError) as exc:
        parser.error(f"--config: {exc}")

    try:
        return args.func(args, settings)
    except (
        MissingArtifact,
        pipeline.PipelineError,
        irl.ConvergenceError,
        lstm_ae.TrainingDiverged,
        lstm_ae.NonFiniteError,
        forecast.RolloutError,
        TransitionError,
        InvalidStateError,
        FileNotFoundError,
        ValueError,
        RuntimeError,
    ) as exc:
        print(f"portirl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
