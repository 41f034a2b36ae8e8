"""Recurrent autoencoder that summarizes scheduling history per window.

A single-layer LSTM reads the per-window state features causally; a tanh
bottleneck on top of its hidden state is the temporal feature vector handed
to the reward learner. Training pulls the bottleneck two ways at once: a
linear decoder must reconstruct the hidden state from it, and a linear head
must predict the window's joint action through per-slot softmaxes scored by
a position-weighted binary cross-entropy.

Everything is float64 numpy with hand-written backpropagation through time;
``gradient_check`` validates the analytic gradients against finite
differences and is wired into the test suite.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .model import N_ACTIONS

EPS = 1e-12


class NonFiniteError(RuntimeError):
    """A forward pass produced NaN or infinity; the message names the layer."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LSTMAEConfig:
    input_dim: int = 57
    hidden_dim: int = 64
    bottleneck_dim: int = 32
    output_dim: int = 190
    recon_weight: float = 0.1
    learning_rate: float = 0.05
    iterations: int = 500
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.output_dim % N_ACTIONS != 0:
            raise ValueError(
                f"output_dim must be a multiple of {N_ACTIONS}, got {self.output_dim}"
            )

    @property
    def n_slots(self) -> int:
        return self.output_dim // N_ACTIONS


@dataclass(frozen=True)
class LossWeights:
    """Per-position weights of the action cross-entropy.

    Positions follow the sub-action wire indices minus one; the idle position
    is nearly free, staying and leaving are cheap, movements cost full price.
    """

    nothing: float = 0.01
    stay: float = 0.1
    leave: float = 0.3
    default: float = 1.0

    def position_weights(self) -> np.ndarray:
        w = np.full(N_ACTIONS, self.default, dtype=np.float64)
        w[0] = self.nothing
        w[1] = self.stay
        w[N_ACTIONS - 1] = self.leave
        return w


UNIT_WEIGHTS = LossWeights(nothing=1.0, stay=1.0, leave=1.0, default=1.0)


def init_params(config: LSTMAEConfig) -> dict[str, np.ndarray]:
    """Seeded parameter dictionary; the forget-gate bias starts at one."""
    rng = np.random.default_rng(config.seed)
    d, h, z, out = (
        config.input_dim,
        config.hidden_dim,
        config.bottleneck_dim,
        config.output_dim,
    )

    def mat(rows, cols):
        return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))

    b = np.zeros(4 * h)
    b[h : 2 * h] = 1.0  # gate order: input, forget, cell, output
    return {
        "wx": mat(4 * h, d),
        "uh": mat(4 * h, h),
        "b": b,
        "w_enc": mat(z, h),
        "b_enc": np.zeros(z),
        "w_dec": mat(h, z),
        "b_dec": np.zeros(h),
        "w_act": mat(out, z),
        "b_act": np.zeros(out),
    }


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{name} produced non-finite values")


def _block_softmax(logits: np.ndarray, n_slots: int) -> np.ndarray:
    """Softmax over each slot's block of the flat logit vector(s)."""
    blocks = logits.reshape(*logits.shape[:-1], n_slots, N_ACTIONS)
    blocks = blocks - blocks.max(axis=-1, keepdims=True)
    e = np.exp(blocks)
    p = e / e.sum(axis=-1, keepdims=True)
    return p.reshape(logits.shape)


def forward(params, xs: np.ndarray, config: LSTMAEConfig) -> dict:
    """Run one sequence causally; returns activations for loss and backprop.

    ``xs`` is (T, input_dim). The cache holds, per step, everything the
    backward pass reuses.
    """
    T = xs.shape[0]
    h_dim = config.hidden_dim
    hs = np.zeros((T, h_dim))
    cs = np.zeros((T, h_dim))
    gates = np.zeros((T, 4 * h_dim))
    h = np.zeros(h_dim)
    c = np.zeros(h_dim)
    for t in range(T):
        pre = params["wx"] @ xs[t] + params["uh"] @ h + params["b"]
        i = _sigmoid(pre[:h_dim])
        f = _sigmoid(pre[h_dim : 2 * h_dim])
        g = np.tanh(pre[2 * h_dim : 3 * h_dim])
        o = _sigmoid(pre[3 * h_dim :])
        c = f * c + i * g
        h = o * np.tanh(c)
        _check_finite(f"lstm step {t}", h, c)
        hs[t], cs[t] = h, c
        gates[t] = np.concatenate([i, f, g, o])
    zs = np.tanh(hs @ params["w_enc"].T + params["b_enc"])
    _check_finite("encoder", zs)
    hhat = zs @ params["w_dec"].T + params["b_dec"]
    _check_finite("decoder", hhat)
    logits = zs @ params["w_act"].T + params["b_act"]
    _check_finite("action head", logits)
    probs = _block_softmax(logits, config.n_slots)
    return {
        "xs": xs,
        "hs": hs,
        "cs": cs,
        "gates": gates,
        "zs": zs,
        "hhat": hhat,
        "logits": logits,
        "probs": probs,
    }


def weighted_ce_loss(probs, targets, weights: LossWeights = LossWeights()):
    """Position-weighted binary cross-entropy, summed over all entries.

    Both arguments are flat action vectors (or stacks of them); each entry is
    scored as an independent Bernoulli with its position's weight. One entry
    with weight 0.3, target 1 and probability 0.5 contributes ``0.3 * ln 2``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {targets.shape}")
    if probs.shape[-1] % N_ACTIONS != 0:
        raise ValueError("last axis must be a whole number of slot blocks")
    w = np.tile(
        weights.position_weights(), probs.shape[-1] // N_ACTIONS
    )
    p = np.clip(probs, EPS, 1.0 - EPS)
    bce = -(targets * np.log(p) + (1.0 - targets) * np.log1p(-p))
    return float(np.sum(w * bce))


def _ce_grad_wrt_logits(probs, targets, weights, n_slots):
    """d(weighted BCE)/d(logits) through the per-slot softmax."""
    w = np.tile(weights.position_weights(), n_slots)
    p = np.clip(probs, EPS, 1.0 - EPS)
    dL_dp = -w * (targets / p - (1.0 - targets) / (1.0 - p))
    shape = probs.shape[:-1] + (n_slots, N_ACTIONS)
    pb = probs.reshape(shape)
    db = dL_dp.reshape(shape)
    inner = (db * pb).sum(axis=-1, keepdims=True)
    return (pb * (db - inner)).reshape(probs.shape)


def loss_and_grad(params, xs, ys, config: LSTMAEConfig, weights: LossWeights):
    """Summed losses and parameter gradients for one sequence.

    Returns ``(bce_sum, mse_sum, grads)`` where the reconstruction error is
    the per-entry mean within each window, summed over windows, and the
    gradients correspond to ``bce_sum + recon_weight * mse_sum``.
    """
    cache = forward(params, xs, config)
    T = xs.shape[0]
    h_dim = config.hidden_dim
    hs, zs, hhat, probs = cache["hs"], cache["zs"], cache["hhat"], cache["probs"]

    bce_sum = weighted_ce_loss(probs, ys, weights)
    diff = hhat - hs
    mse_sum = float(np.sum(diff**2) / h_dim)

    grads = {k: np.zeros_like(v) for k, v in params.items()}

    dlogits = _ce_grad_wrt_logits(probs, ys, weights, config.n_slots)
    grads["w_act"] += dlogits.T @ zs
    grads["b_act"] += dlogits.sum(axis=0)
    dz = dlogits @ params["w_act"]

    dhhat = config.recon_weight * 2.0 * diff / h_dim
    grads["w_dec"] += dhhat.T @ zs
    grads["b_dec"] += dhhat.sum(axis=0)
    dz += dhhat @ params["w_dec"]

    dz_pre = dz * (1.0 - zs**2)
    grads["w_enc"] += dz_pre.T @ hs
    grads["b_enc"] += dz_pre.sum(axis=0)
    dhs = dz_pre @ params["w_enc"]
    dhs -= config.recon_weight * 2.0 * diff / h_dim  # reconstruction target side

    dh_next = np.zeros(h_dim)
    dc_next = np.zeros(h_dim)
    for t in range(T - 1, -1, -1):
        i = cache["gates"][t, :h_dim]
        f = cache["gates"][t, h_dim : 2 * h_dim]
        g = cache["gates"][t, 2 * h_dim : 3 * h_dim]
        o = cache["gates"][t, 3 * h_dim :]
        c = cache["cs"][t]
        c_prev = cache["cs"][t - 1] if t > 0 else np.zeros(h_dim)
        h_prev = hs[t - 1] if t > 0 else np.zeros(h_dim)
        tanh_c = np.tanh(c)

        dh = dhs[t] + dh_next
        do = dh * tanh_c
        dc = dc_next + dh * o * (1.0 - tanh_c**2)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_next = dc * f

        dpre = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g**2),
                do * o * (1.0 - o),
            ]
        )
        grads["wx"] += np.outer(dpre, xs[t])
        grads["uh"] += np.outer(dpre, h_prev)
        grads["b"] += dpre
        dh_next = params["uh"].T @ dpre
    return bce_sum, mse_sum, grads


def step_features(params, x: np.ndarray, h: np.ndarray, c: np.ndarray, config: LSTMAEConfig):
    """Advance the recurrence one window; returns (features, h, c)."""
    h_dim = config.hidden_dim
    pre = params["wx"] @ x + params["uh"] @ h + params["b"]
    i = _sigmoid(pre[:h_dim])
    f = _sigmoid(pre[h_dim : 2 * h_dim])
    g = np.tanh(pre[2 * h_dim : 3 * h_dim])
    o = _sigmoid(pre[3 * h_dim :])
    c = f * c + i * g
    h = o * np.tanh(c)
    z = np.tanh(params["w_enc"] @ h + params["b_enc"])
    return z, h, c


def extract_features(params, xs: np.ndarray, config: LSTMAEConfig) -> np.ndarray:
    """Temporal feature per window, computed causally over one sequence."""
    out = np.zeros((xs.shape[0], config.bottleneck_dim))
    h = np.zeros(config.hidden_dim)
    c = np.zeros(config.hidden_dim)
    for t in range(xs.shape[0]):
        out[t], h, c = step_features(params, xs[t], h, c, config)
    _check_finite("encoder", out)
    return out


def _global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g**2)) for g in grads.values())))


def train(
    sequences: list[tuple[np.ndarray, np.ndarray]],
    config: LSTMAEConfig,
    weights: LossWeights = LossWeights(),
    params: dict | None = None,
    checkpoint_on_divergence: str | None = None,
):
    """Full-batch gradient descent over input/target sequence pairs.

    Gradients from all sequences sum, are normalized per window and clipped
    to ``clip_norm``. Returns ``(params, history)``; a non-finite objective
    aborts with ``TrainingDiverged`` after optionally saving the last good
    parameters to ``checkpoint_on_divergence``.
    """
    if params is None:
        params = init_params(config)
    params = {k: v.copy() for k, v in params.items()}
    t_total = sum(xs.shape[0] for xs, _ in sequences)
    if t_total == 0:
        raise ValueError("no windows to train on")
    history: list[dict] = []
    for it in range(config.iterations):
        bce_total = 0.0
        mse_total = 0.0
        grads_total = {k: np.zeros_like(v) for k, v in params.items()}
        for xs, ys in sequences:
            bce, mse, grads = loss_and_grad(params, xs, ys, config, weights)
            bce_total += bce
            mse_total += mse
            for k in grads_total:
                grads_total[k] += grads[k]
        objective = (bce_total + config.recon_weight * mse_total) / t_total
        if not np.isfinite(objective):
            if checkpoint_on_divergence:
                save_checkpoint(checkpoint_on_divergence, params, config)
            raise TrainingDiverged(f"objective became non-finite at iteration {it}")
        for k in grads_total:
            grads_total[k] /= t_total
        gnorm = _global_norm(grads_total)
        scale = min(1.0, config.clip_norm / max(gnorm, EPS))
        history.append(
            {
                "iteration": it,
                "objective": objective,
                "bce_per_entry": bce_total / (t_total * config.output_dim),
                "recon_mse_per_entry": mse_total / t_total,
                "grad_norm": gnorm,
            }
        )
        lr = config.learning_rate * scale
        for k in params:
            params[k] = params[k] - lr * grads_total[k]
    return params, history


def gradient_check(
    seed: int = 0,
    n_samples: int = 200,
    eps: float = 1e-5,
    corrupt: bool = False,
    weights: LossWeights = LossWeights(),
):
    """Compare analytic gradients with central differences on a small model.

    Samples at least ``n_samples`` coordinates across every parameter array
    and returns ``(max_rel_err, per_array_worst)``. ``corrupt=True`` injects
    a deliberate error into one gradient entry so callers can confirm the
    check actually bites.
    """
    config = LSTMAEConfig(
        input_dim=6,
        hidden_dim=8,
        bottleneck_dim=4,
        output_dim=20,
        recon_weight=0.1,
        seed=seed,
    )
    rng = np.random.default_rng(seed + 1)
    T = 5
    xs = rng.normal(size=(T, config.input_dim))
    ys = np.zeros((T, config.output_dim))
    for t in range(T):
        for s in range(config.n_slots):
            k = rng.integers(0, N_ACTIONS + 1)
            if k < N_ACTIONS:  # leave some blocks all-zero
                ys[t, s * N_ACTIONS + k] = 1.0
    params = init_params(config)

    def objective(p):
        bce, mse, _ = loss_and_grad(p, xs, ys, config, weights)
        return bce + config.recon_weight * mse

    _, _, grads = loss_and_grad(params, xs, ys, config, weights)
    if corrupt:
        grads["w_enc"][0, 0] += 0.1

    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    if corrupt:
        # make sure the corrupted coordinate is actually probed
        corrupted_flat = sum(
            params[k].size for k in names[: names.index("w_enc")]
        )
        picks[0] = corrupted_flat
    worst: dict[str, float] = {k: 0.0 for k in names}
    max_err = 0.0
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat_idx in np.sort(picks):
        arr_i = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name = names[arr_i]
        local = int(flat_idx - offsets[arr_i])
        idx = np.unravel_index(local, params[name].shape)
        orig = params[name][idx]
        params[name][idx] = orig + eps
        up = objective(params)
        params[name][idx] = orig - eps
        down = objective(params)
        params[name][idx] = orig
        fd = (up - down) / (2 * eps)
        err = abs(fd - grads[name][idx]) / max(1.0, abs(fd))
        worst[name] = max(worst[name], err)
        max_err = max(max_err, err)
    return max_err, worst


def save_checkpoint(path, params, config: LSTMAEConfig) -> None:
    payload = {
        "config": dataclasses.asdict(config),
        "params": {k: v.tolist() for k, v in sorted(params.items())},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    config = LSTMAEConfig(**payload["config"])
    params = {
        k: np.array(v, dtype=np.float64) for k, v in payload["params"].items()
    }
    return params, config


def write_history_csv(path, history: list[dict]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "objective", "bce_per_entry", "recon_mse_per_entry", "grad_norm"]
        )
        for row in history:
            writer.writerow(
                [
                    row["iteration"],
                    repr(row["objective"]),
                    repr(row["bce_per_entry"]),
                    repr(row["recon_mse_per_entry"]),
                    repr(row["grad_norm"]),
                ]
            )


def write_features_csv(path, feature_rows: list[tuple[int, np.ndarray]]) -> None:
    """Rows of (window index, feature vector) to CSV with stable formatting."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        dim = len(feature_rows[0][1]) if feature_rows else 0
        writer.writerow(["window"] + [f"z{i}" for i in range(dim)])
        for window, vec in feature_rows:
            writer.writerow([window] + [repr(float(v)) for v in vec])
