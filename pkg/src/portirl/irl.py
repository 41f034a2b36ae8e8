"""Maximum-entropy inverse reinforcement learning over port schedules.

Two operating modes share one reward-learning loop:

* ``exact`` — the state space is small enough to enumerate, so soft values
  are solved to a fixed point and the likelihood gradient is obtained by
  differentiating straight through that fixed point (a dense linear solve).
* ``factored`` — the full port is far too large to enumerate, so the policy
  factorizes into one softmax per slot over that slot's legal sub-actions,
  conditioned on shared state and temporal features.

Rewards are linear in features by default; the factored mode can swap in a
one-hidden-layer network when the linear form is too blunt.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import N_ACTIONS

V_DEFINITIONS = ("expected_q", "logsumexp")
REWARD_FORMS = ("linear", "mlp")
MODES = ("exact", "factored")


class ConvergenceError(RuntimeError):
    """Value iteration or fitting failed to reach its tolerance."""


@dataclass(frozen=True)
class IRLConfig:
    """Knobs for both solver modes.

    ``gamma`` defaults per mode (0.9 exact, 0.0 factored). ``v_definition``
    picks how the state value is read off the soft Q-values: ``expected_q``
    averages Q under the policy, ``logsumexp`` uses the partition function.
    """

    mode: str = "factored"
    gamma: float | None = None
    value_tol: float = 1e-10
    max_sweeps: int = 200_000
    v_definition: str = "expected_q"
    reward_form: str = "linear"
    mlp_hidden: int = 32
    learning_rate: float | None = None
    fit_iterations: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.v_definition not in V_DEFINITIONS:
            raise ValueError(
                f"v_definition must be one of {V_DEFINITIONS}, got {self.v_definition!r}"
            )
        if self.reward_form not in REWARD_FORMS:
            raise ValueError(
                f"reward_form must be one of {REWARD_FORMS}, got {self.reward_form!r}"
            )

    def resolved_gamma(self) -> float:
        if self.gamma is not None:
            return self.gamma
        return 0.9 if self.mode == "exact" else 0.0

    def resolved_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        if self.mode == "exact":
            return 0.1
        return 1.0 if self.reward_form == "linear" else 0.05


@dataclass
class SoftValues:
    """Converged soft values plus the solver's stopping diagnostics."""

    q: np.ndarray
    v: np.ndarray
    logz: np.ndarray
    iterations: int
    residual: float


def soft_value_iteration(mdp, reward_sa, config: IRLConfig) -> SoftValues:
    """Solve the soft Bellman fixed point on an enumerated model.

    ``mdp`` provides the flat arrays (``sa_ptr``, ``succ_ptr``, ``succ_idx``,
    ``succ_prob``, ``terminal``). Raises ``ConvergenceError`` if the sweep
    residual is still above ``value_tol`` after ``max_sweeps``.
    """
    reward = np.ascontiguousarray(reward_sa, dtype=np.float64)
    q, v, logz, iters, delta = kernels.svi_solve(
        reward,
        mdp.sa_ptr,
        mdp.succ_ptr,
        mdp.succ_idx,
        mdp.succ_prob,
        mdp.terminal,
        config.resolved_gamma(),
        config.value_tol,
        config.max_sweeps,
        config.v_definition == "expected_q",
    )
    if delta > config.value_tol:
        raise ConvergenceError(
            f"value iteration residual {delta:.3e} above {config.value_tol:.1e} "
            f"after {iters} sweeps"
        )
    return SoftValues(q=q, v=v, logz=logz, iterations=iters, residual=delta)


def state_of_row(mdp) -> np.ndarray:
    """Map each flat state-action row back to its state index."""
    return np.repeat(
        np.arange(mdp.n_states, dtype=np.int64), np.diff(mdp.sa_ptr)
    )


def exact_policy(mdp, values: SoftValues) -> np.ndarray:
    """Per-row action probabilities exp(Q - logZ) of the soft policy."""
    return np.exp(values.q - values.logz[state_of_row(mdp)])


def _flatten_observations(trajectories) -> tuple[np.ndarray, np.ndarray]:
    states, locals_ = [], []
    for traj in trajectories:
        for s, a in traj:
            states.append(s)
            locals_.append(a)
    return np.array(states, dtype=np.int64), np.array(locals_, dtype=np.int64)


def exact_log_likelihood(mdp, theta, trajectories, config: IRLConfig) -> float:
    """Total log-probability of the observed state-action pairs."""
    reward = mdp.phi @ np.asarray(theta, dtype=np.float64)
    values = soft_value_iteration(mdp, reward, config)
    s_idx, a_loc = _flatten_observations(trajectories)
    rows = mdp.sa_ptr[s_idx] + a_loc
    return float(np.sum(values.q[rows] - values.logz[s_idx]))


def exact_grad_log_likelihood(mdp, theta, trajectories, config: IRLConfig):
    """Likelihood and its gradient, differentiated through the fixed point.

    The Jacobian of the converged values with respect to the reward weights
    satisfies a linear fixed point of its own; with an enumerable model it is
    solved directly as a dense system rather than iterated.
    """
    theta = np.asarray(theta, dtype=np.float64)
    reward = mdp.phi @ theta
    values = soft_value_iteration(mdp, reward, config)
    pi = exact_policy(mdp, values)
    gamma = config.resolved_gamma()
    n_s, n_sa = mdp.n_states, mdp.n_sa
    if n_s > 4000:
        raise ValueError(
            "dense fixed-point gradient is limited to enumerable models "
            f"(n_states={n_s})"
        )
    rows_state = state_of_row(mdp)

    if config.v_definition == "expected_q":
        w = pi * (1.0 + values.q - values.v[rows_state])
    else:
        w = pi.copy()

    # dense successor matrix P[row, s'] and weight matrix W[s, row]
    P = np.zeros((n_sa, n_s), dtype=np.float64)
    for row in range(n_sa):
        ks = slice(int(mdp.succ_ptr[row]), int(mdp.succ_ptr[row + 1]))
        np.add.at(P[row], mdp.succ_idx[ks], mdp.succ_prob[ks])
    W = np.zeros((n_s, n_sa), dtype=np.float64)
    W[rows_state, np.arange(n_sa)] = w
    W[mdp.terminal.astype(bool)] = 0.0  # pinned values do not move

    A = np.eye(n_s) - gamma * (W @ P)
    B = W @ mdp.phi
    g_v = np.linalg.solve(A, B)
    g_v[mdp.terminal.astype(bool)] = 0.0
    g_q = mdp.phi + gamma * (P @ g_v)

    s_idx, a_loc = _flatten_observations(trajectories)
    obs_rows = mdp.sa_ptr[s_idx] + a_loc
    ll = float(np.sum(values.q[obs_rows] - values.logz[s_idx]))

    # expected feature-Jacobian under the policy, per state
    pi_gq = pi[:, None] * g_q
    expect_by_state = np.add.reduceat(pi_gq, mdp.sa_ptr[:-1], axis=0)
    grad = g_q[obs_rows].sum(axis=0) - expect_by_state[s_idx].sum(axis=0)
    return ll, grad


# ---------------------------------------------------------------------------
# Factored mode
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FactoredSample:
    """One scheduling window as seen by the factored learner.

    ``legal[i]`` lists slot ``i``'s legal sub-action wire indices (ascending)
    and ``chosen[i]`` the one the operator took.
    """

    features: np.ndarray
    temporal: np.ndarray
    legal: tuple[tuple[int, ...], ...]
    chosen: tuple[int, ...]


def action_block(wire_index: int) -> np.ndarray:
    """Sub-action part of the feature vector; the idle action is all-zero."""
    block = np.zeros(N_ACTIONS, dtype=np.float64)
    if wire_index != 1:
        block[wire_index - 1] = 1.0
    return block


def make_phi(features, temporal, wire_index: int) -> np.ndarray:
    return np.concatenate(
        [
            np.asarray(features, dtype=np.float64),
            np.asarray(temporal, dtype=np.float64),
            action_block(wire_index),
        ]
    )


@dataclass
class FactoredDesign:
    """Dataset flattened into one feature row per candidate sub-action.

    Rows group into softmax problems: ``row_ptr[g]:row_ptr[g+1]`` spans group
    ``g`` and ``chosen_row[g]`` points at the row the operator picked.
    """

    phi: np.ndarray
    row_ptr: np.ndarray
    chosen_row: np.ndarray

    @property
    def n_groups(self) -> int:
        return len(self.row_ptr) - 1

    def group_sizes(self) -> np.ndarray:
        return np.diff(self.row_ptr)


def build_design(samples: list[FactoredSample]) -> FactoredDesign:
    """Precompute every candidate row once; rewards re-score them cheaply."""
    rows: list[np.ndarray] = []
    row_ptr = [0]
    chosen_row: list[int] = []
    for si, sample in enumerate(samples):
        if len(sample.legal) != len(sample.chosen):
            raise ValueError(f"sample {si}: legal/chosen length mismatch")
        for slot, (legal, chosen) in enumerate(
            zip(sample.legal, sample.chosen)
        ):
            if not legal:
                raise ValueError(f"sample {si} slot {slot}: empty legal set")
            if chosen not in legal:
                raise ValueError(
                    f"sample {si} slot {slot}: chosen action {chosen} not in "
                    f"legal set {legal}"
                )
            for k in legal:
                rows.append(make_phi(sample.features, sample.temporal, k))
            chosen_row.append(row_ptr[-1] + legal.index(chosen))
            row_ptr.append(row_ptr[-1] + len(legal))
    return FactoredDesign(
        phi=np.vstack(rows),
        row_ptr=np.array(row_ptr, dtype=np.int64),
        chosen_row=np.array(chosen_row, dtype=np.int64),
    )


class LinearReward:
    """Reward linear in the (state, temporal, sub-action) features."""

    form = "linear"

    def __init__(self, theta: np.ndarray):
        self.theta = np.asarray(theta, dtype=np.float64)

    @classmethod
    def zeros(cls, dim: int) -> "LinearReward":
        return cls(np.zeros(dim, dtype=np.float64))

    @property
    def n_params(self) -> int:
        return self.theta.size

    def flat(self) -> np.ndarray:
        return self.theta.copy()

    def with_flat(self, flat: np.ndarray) -> "LinearReward":
        return LinearReward(flat)

    def logits(self, phi: np.ndarray) -> np.ndarray:
        return phi @ self.theta

    def grad(self, phi: np.ndarray, gvec: np.ndarray) -> np.ndarray:
        return phi.T @ gvec

    def to_json(self) -> dict:
        return {"theta": self.theta.tolist()}

    @classmethod
    def from_json(cls, payload: dict) -> "LinearReward":
        return cls(np.array(payload["theta"], dtype=np.float64))


class MLPReward:
    """One-hidden-layer tanh network producing a scalar reward per row."""

    form = "mlp"

    def __init__(self, w1, b1, w2, b2):
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = float(b2)

    @classmethod
    def init(cls, dim: int, hidden: int, seed: int) -> "MLPReward":
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.normal(0.0, 1.0 / np.sqrt(dim), size=(hidden, dim)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=hidden),
            b2=0.0,
        )

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + 1

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.w1.ravel(), self.b1, self.w2, [self.b2]]
        )

    def with_flat(self, flat: np.ndarray) -> "MLPReward":
        h, d = self.w1.shape
        parts = np.split(flat, [h * d, h * d + h, h * d + 2 * h])
        return MLPReward(parts[0].reshape(h, d), parts[1], parts[2], parts[3][0])

    def logits(self, phi: np.ndarray) -> np.ndarray:
        hidden = np.tanh(phi @ self.w1.T + self.b1)
        return hidden @ self.w2 + self.b2

    def grad(self, phi: np.ndarray, gvec: np.ndarray) -> np.ndarray:
        hidden = np.tanh(phi @ self.w1.T + self.b1)
        d_w2 = hidden.T @ gvec
        d_b2 = float(gvec.sum())
        d_pre = (gvec[:, None] * self.w2) * (1.0 - hidden**2)
        d_w1 = d_pre.T @ phi
        d_b1 = d_pre.sum(axis=0)
        return np.concatenate([d_w1.ravel(), d_b1, d_w2, [d_b2]])

    def to_json(self) -> dict:
        return {
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "MLPReward":
        return cls(payload["w1"], payload["b1"], payload["w2"], payload["b2"])


def _group_softmax(logits: np.ndarray, row_ptr: np.ndarray):
    """Per-group logZ and probabilities over a flat logit vector."""
    starts = row_ptr[:-1]
    sizes = np.diff(row_ptr)
    gmax = np.maximum.reduceat(logits, starts)
    shifted = np.exp(logits - np.repeat(gmax, sizes))
    z = np.add.reduceat(shifted, starts)
    logz = gmax + np.log(z)
    pi = shifted / np.repeat(z, sizes)
    return logz, pi


def factored_log_likelihood(design: FactoredDesign, model) -> float:
    """Total log-probability of the chosen sub-actions under the model."""
    logits = model.logits(design.phi)
    logz, _ = _group_softmax(logits, design.row_ptr)
    return float(np.sum(logits[design.chosen_row] - logz))


def factored_grad_log_likelihood(design: FactoredDesign, model):
    logits = model.logits(design.phi)
    logz, pi = _group_softmax(logits, design.row_ptr)
    ll = float(np.sum(logits[design.chosen_row] - logz))
    gvec = -pi
    gvec[design.chosen_row] += 1.0
    return ll, model.grad(design.phi, gvec)


def slot_action_distribution(model, features, temporal, legal) -> np.ndarray:
    """Probabilities over one slot's legal sub-actions, aligned with ``legal``."""
    phi = np.vstack([make_phi(features, temporal, k) for k in legal])
    logits = model.logits(phi)
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    """Fitted parameters plus the per-iteration trace."""

    config: IRLConfig
    params: np.ndarray
    history: list[dict] = field(default_factory=list)
    best_ll_mean: float = float("-inf")

    def model(self):
        """Reward object for factored results (exact results are plain weights)."""
        if self.config.mode != "factored":
            raise ValueError("exact-mode results hold weights, not a reward model")
        return _rebuild_model(self.config, len(self.params), self.params)


def _rebuild_model(config: IRLConfig, n_params: int, flat: np.ndarray):
    if config.reward_form == "linear":
        return LinearReward(flat)
    h = config.mlp_hidden
    # n_params = h*d + h + h + 1
    d = (n_params - 2 * h - 1) // h
    template = MLPReward(np.zeros((h, d)), np.zeros(h), np.zeros(h), 0.0)
    return template.with_flat(flat)


def _ascend(eval_fn, x0: np.ndarray, config: IRLConfig, n_units: int) -> FitResult:
    """Plain gradient ascent with per-decision normalization and best tracking."""
    lr = config.resolved_learning_rate()
    x = x0.copy()
    best_x = x.copy()
    best = float("-inf")
    history: list[dict] = []
    for it in range(config.fit_iterations + 1):
        ll, grad = eval_fn(x)
        ll_mean = ll / n_units
        gnorm = float(np.linalg.norm(grad / n_units))
        if not np.isfinite(ll_mean) or not np.all(np.isfinite(grad)):
            raise ConvergenceError(f"non-finite objective at iteration {it}")
        history.append(
            {"iteration": it, "ll_mean": ll_mean, "grad_norm": gnorm}
        )
        if ll_mean > best:
            best = ll_mean
            best_x = x.copy()
        if it == config.fit_iterations:
            break
        x = x + lr * (grad / n_units)
    return FitResult(
        config=config, params=best_x, history=history, best_ll_mean=best
    )


def fit_exact(mdp, trajectories, config: IRLConfig) -> FitResult:
    """Learn linear reward weights on an enumerated model, starting from zero."""
    if config.mode != "exact":
        raise ValueError("fit_exact requires an exact-mode config")
    n_obs = sum(len(t) for t in trajectories)
    if n_obs == 0:
        raise ValueError("no observations to fit")

    def eval_fn(theta):
        return exact_grad_log_likelihood(mdp, theta, trajectories, config)

    x0 = np.zeros(mdp.phi.shape[1], dtype=np.float64)
    return _ascend(eval_fn, x0, config, n_obs)


def fit_factored(samples: list[FactoredSample], config: IRLConfig) -> FitResult:
    """Learn the factored reward from observed windows, starting from zero.

    The network form starts from a small seeded initialization instead, since
    an all-zero network has no gradient to follow.
    """
    if config.mode != "factored":
        raise ValueError("fit_factored requires a factored-mode config")
    design = build_design(samples)
    dim = design.phi.shape[1]
    if config.reward_form == "linear":
        model0 = LinearReward.zeros(dim)
    else:
        model0 = MLPReward.init(dim, config.mlp_hidden, config.seed)

    def eval_fn(flat):
        model = model0.with_flat(flat)
        return factored_grad_log_likelihood(design, model)

    return _ascend(eval_fn, model0.flat(), config, design.n_groups)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_checkpoint(path, result: FitResult, extra: dict | None = None) -> None:
    """Write a fitted reward to JSON (sorted keys, reproducible bytes)."""
    config = dataclasses.asdict(result.config)
    if result.config.mode == "factored":
        params = result.model().to_json()
        params["form"] = result.config.reward_form
    else:
        params = {"theta": result.params.tolist(), "form": "linear"}
    payload = {
        "config": config,
        "params": params,
        "best_ll_mean": result.best_ll_mean,
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint back into (config, reward-or-weights, extra)."""
    with open(path) as fh:
        payload = json.load(fh)
    config = IRLConfig(**payload["config"])
    params = payload["params"]
    if config.mode == "factored":
        if params["form"] == "linear":
            model = LinearReward.from_json(params)
        else:
            model = MLPReward.from_json(params)
        return config, model, payload.get("extra", {})
    theta = np.array(params["theta"], dtype=np.float64)
    return config, theta, payload.get("extra", {})


def write_history_csv(path, history: list[dict]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "ll_mean", "grad_norm"])
        for row in history:
            writer.writerow(
                [row["iteration"], repr(row["ll_mean"]), repr(row["grad_norm"])]
            )
