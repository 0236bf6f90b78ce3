"""Soft actor-critic training loop with the LQR gain penalty.

One value network with an EMA target, twin Q networks, and a
squashed-Gaussian actor. Once the local linear model and its gain K_hat
are available, the actor loss gains lambda_k * (sum_g ||J(x_g) + K_hat||_F
+ ||mu_action(0)||), where J is the analytic Jacobian of the deterministic
action map and the evaluation states x_g are the origin plus minibatch
states inside the eta-ball. The feedback convention is u = -K x, so the
Jacobian target is -K_hat (a config switch selects the literal +K reading).

Update protocol per gradient step, fixed so independent implementations
can replay it bit for bit from a shared seed stream:

1. minibatch indices: rng.choice(len(buffer), batch_size, replace=False)
2. value-target action noise: rng.standard_normal((batch_size, action_dim))
3. value loss, Adam step on the value network
4. twin-Q losses (targets from the EMA value net), Adam steps on q1, q2
5. actor action noise: rng.standard_normal((batch_size, action_dim))
6. actor loss (through the post-step q1/q2), Adam step on the actor
7. every target_update_interval steps: psi_bar <- tau psi + (1-tau) psi_bar

All randomness flows from TrainConfig.seed through three named
SeedSequence children, in order: env (resets), agent (init, action and
update noise, minibatches), eval (unused here, reserved for evaluation).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import envs, linalg, nets, sysid
from .nets import GaussianPolicy, Mlp


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminated: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminated: np.ndarray  # float 0/1


class ReplayBuffer:
    """Ring buffer with uniform without-replacement minibatch sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminated = np.zeros(capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        i = self.cursor
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.terminated[i] = 1.0 if t.terminated else 0.0
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, k: int, rng: np.random.Generator) -> Batch:
        if k > self.size:
            raise ValueError(f"cannot sample {k} transitions from buffer of {self.size}")
        idx = rng.choice(self.size, size=k, replace=False)
        return Batch(
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_states=self.next_states[idx],
            terminated=self.terminated[idx],
        )


@dataclass
class TrainConfig:
    total_steps: int = 30_000
    gamma: float = 0.99
    alpha: float = 0.2
    tau: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    reward_scale: float = 2.0
    gradient_steps: int = 1
    target_update_interval: int = 1
    episode_cap: int = 500
    hidden_layers: int = 2
    hidden_size: int = 16
    eta: float = 0.2
    threshold_a: int = 1000
    threshold_b: int = 1000
    sysid_enabled: bool = True
    sysid_ridge: float = 1e-8
    sysid_recompute_every: int = 10_000
    sysid_retry_after: int = 100
    explore_floor: float = 0.01
    lambda_k: float = 1.0
    gain_eval_states: int = 8
    gain_target_literal_sign: bool = False
    gain_penalty_grad: str = "analytic"  # "fd" is the cross-check fallback
    lqr_r_scale: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if not 0.0 < self.gamma < 1.0:
            problems.append(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            problems.append(f"tau must be in (0, 1], got {self.tau}")
        if self.lambda_k < 0.0:
            problems.append(f"lambda_k must be >= 0, got {self.lambda_k}")
        if self.alpha < 0.0:
            problems.append(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.gain_penalty_grad not in ("analytic", "fd"):
            problems.append(
                f"gain_penalty_grad must be 'analytic' or 'fd', got {self.gain_penalty_grad!r}"
            )
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class SacNets:
    value: Mlp
    target_value: Mlp
    q1: Mlp
    q2: Mlp
    actor: GaussianPolicy
    value_opt: nets.AdamState
    q1_opt: nets.AdamState
    q2_opt: nets.AdamState
    actor_opt: nets.AdamState
    updates_done: int = 0


def make_nets(env: envs.EnvSpec, cfg: TrainConfig, rng: np.random.Generator) -> SacNets:
    n, m = env.state_dim, env.action_dim
    hidden = [cfg.hidden_size] * cfg.hidden_layers
    value = nets.mlp_init([n] + hidden + [1], rng)
    q1 = nets.mlp_init([n + m] + hidden + [1], rng)
    q2 = nets.mlp_init([n + m] + hidden + [1], rng)
    actor = nets.policy_init(n, m, hidden, env.action_low, env.action_high, rng)
    return SacNets(
        value=value,
        target_value=copy.deepcopy(value),
        q1=q1,
        q2=q2,
        actor=actor,
        value_opt=nets.adam_init(value.params()),
        q1_opt=nets.adam_init(q1.params()),
        q2_opt=nets.adam_init(q2.params()),
        actor_opt=nets.adam_init(actor.params()),
    )


# ---------------------------------------------------------------------------
# losses


def value_targets(states: np.ndarray, sac: SacNets, alpha: float, noise: np.ndarray):
    """V_hat = min(Q1, Q2)(x, a) - alpha log pi(a|x) with fresh reparameterized
    actions; a detached target (no gradient flows anywhere)."""
    sample = nets.policy_sample_batch(sac.actor, states, noise)
    xa = np.concatenate([states, sample.action], axis=1)
    q1, _ = nets.mlp_forward_batch(sac.q1, xa)
    q2, _ = nets.mlp_forward_batch(sac.q2, xa)
    return np.minimum(q1[:, 0], q2[:, 0]) - alpha * sample.log_prob


def value_target(x: np.ndarray, sac: SacNets, alpha: float, rng: np.random.Generator):
    """Single-state, single-sample value target."""
    x = np.asarray(x, dtype=float)
    noise = rng.standard_normal((1, sac.actor.action_dim))
    return float(value_targets(x[None, :], sac, alpha, noise)[0])


def value_loss_and_grads(batch: Batch, sac: SacNets, alpha: float, noise: np.ndarray):
    targets = value_targets(batch.states, sac, alpha, noise)
    v, cache = nets.mlp_forward_batch(sac.value, batch.states)
    resid = v[:, 0] - targets
    loss = 0.5 * float(np.mean(resid * resid))
    upstream = (resid / batch.states.shape[0])[:, None]
    grads, _ = nets.mlp_backward(sac.value, cache, upstream)
    return loss, grads


def q_loss_and_grads(batch: Batch, sac: SacNets, gamma: float):
    """Twin soft-Bellman residual losses; the target bootstraps through the
    EMA value network and never through a terminated transition."""
    vbar, _ = nets.mlp_forward_batch(sac.target_value, batch.next_states)
    q_hat = batch.rewards + gamma * vbar[:, 0] * (1.0 - batch.terminated)
    xa = np.concatenate([batch.states, batch.actions], axis=1)
    out = []
    for qnet in (sac.q1, sac.q2):
        q, cache = nets.mlp_forward_batch(qnet, xa)
        resid = q[:, 0] - q_hat
        loss = 0.5 * float(np.mean(resid * resid))
        upstream = (resid / batch.states.shape[0])[:, None]
        grads, _ = nets.mlp_backward(qnet, cache, upstream)
        out.append((loss, grads))
    (loss1, grads1), (loss2, grads2) = out
    return loss1, grads1, loss2, grads2


def gain_eval_states(
    states: np.ndarray, eta: float, max_states: int, state_dim: int
) -> np.ndarray:
    """Origin plus the first `max_states` minibatch states inside the
    eta-ball (where the local linear model is valid)."""
    rows = [np.zeros(state_dim)]
    norms = np.linalg.norm(states, axis=1)
    for i in np.nonzero(norms < eta)[0][:max_states]:
        rows.append(states[i])
    return np.stack(rows)


def actor_loss_and_grads(
    batch: Batch,
    sac: SacNets,
    cfg: TrainConfig,
    noise: np.ndarray,
    gain: sysid.GainEstimate | None,
):
    """Reparameterized actor loss mean(alpha log pi - min Q), plus the gain
    penalty when an estimate is available. Returns (loss, grads, penalty)."""
    states = batch.states
    batch_size = states.shape[0]
    actor = sac.actor

    sample = nets.policy_sample_batch(actor, states, noise)
    xa = np.concatenate([states, sample.action], axis=1)
    q1, cache1 = nets.mlp_forward_batch(sac.q1, xa)
    q2, cache2 = nets.mlp_forward_batch(sac.q2, xa)
    q1v, q2v = q1[:, 0], q2[:, 0]
    take1 = (q1v <= q2v).astype(float)
    q_min = np.minimum(q1v, q2v)
    loss = float(np.mean(cfg.alpha * sample.log_prob - q_min))

    # d(-mean q_min)/d(action) via input gradients of the selected twin
    up1 = (-take1 / batch_size)[:, None]
    up2 = (-(1.0 - take1) / batch_size)[:, None]
    _, dxa1 = nets.mlp_backward(sac.q1, cache1, up1)
    _, dxa2 = nets.mlp_backward(sac.q2, cache2, up2)
    d_action = (dxa1 + dxa2)[:, states.shape[1] :]

    t = sample.tanh_w
    sech2 = 1.0 - t * t
    # shared factor on d(presquash w): alpha log pi contributes 2 tanh(w),
    # the Q path contributes d_action * a * sech^2(w)
    d_w = (cfg.alpha / batch_size) * (2.0 * t) + d_action * actor.bound_scale * sech2
    d_mu = d_w
    d_ls = -(cfg.alpha / batch_size) + d_w * sample.sigma * sample.noise
    d_ls_raw = d_ls * sample.clamp_pass
    grads = nets.policy_head_backward(actor, sample.hs, d_mu, d_ls_raw)

    penalty = 0.0
    if gain is not None and cfg.lambda_k > 0.0:
        target = gain.k_hat if cfg.gain_target_literal_sign else -gain.k_hat
        xg = gain_eval_states(states, cfg.eta, cfg.gain_eval_states, states.shape[1])
        pen_jac, pgrads = nets.action_jacobian_penalty_and_grads(actor, xg, target)
        pen_origin, ograds = nets.origin_action_norm_and_grads(actor)
        if cfg.gain_penalty_grad == "fd":
            fd = nets.gain_penalty_fd_grads(actor, xg, target)
            pgrads = fd
            ograds = [np.zeros_like(g) for g in fd]
        penalty = pen_jac + pen_origin
        loss += cfg.lambda_k * penalty
        for g, pg, og in zip(grads, pgrads, ograds):
            g += cfg.lambda_k * (pg + og)
    return loss, grads, penalty


def target_update(sac: SacNets, tau: float) -> None:
    """psi_bar <- tau psi + (1 - tau) psi_bar, parameterwise."""
    for tgt, src in zip(sac.target_value.params(), sac.value.params()):
        tgt[...] = tau * src + (1.0 - tau) * tgt


def gradient_step(
    sac: SacNets,
    buffer: ReplayBuffer,
    cfg: TrainConfig,
    rng: np.random.Generator,
    gain: sysid.GainEstimate | None,
):
    """One full update in the module-documented protocol order."""
    batch = buffer.sample(cfg.batch_size, rng)
    m = sac.actor.action_dim

    noise_v = rng.standard_normal((cfg.batch_size, m))
    v_loss, v_grads = value_loss_and_grads(batch, sac, cfg.alpha, noise_v)
    nets.adam_update(sac.value.params(), v_grads, sac.value_opt, cfg.lr)

    q1_loss, q1_grads, q2_loss, q2_grads = q_loss_and_grads(batch, sac, cfg.gamma)
    nets.adam_update(sac.q1.params(), q1_grads, sac.q1_opt, cfg.lr)
    nets.adam_update(sac.q2.params(), q2_grads, sac.q2_opt, cfg.lr)

    noise_a = rng.standard_normal((cfg.batch_size, m))
    a_loss, a_grads, penalty = actor_loss_and_grads(batch, sac, cfg, noise_a, gain)
    nets.adam_update(sac.actor.params(), a_grads, sac.actor_opt, cfg.lr)

    sac.updates_done += 1
    if sac.updates_done % cfg.target_update_interval == 0:
        target_update(sac, cfg.tau)
    return v_loss, q1_loss, q2_loss, a_loss, penalty


# ---------------------------------------------------------------------------
# training loop


def finalize_policy(policy: GaussianPolicy) -> GaussianPolicy:
    """Shift the deterministic map so it vanishes exactly at the origin.

    Idempotent: a second call measures a zero action at the origin and
    leaves the shift untouched. The Jacobian of the action map is
    unchanged (the shift is a constant)."""
    at_origin = nets.policy_mean_action(policy, np.zeros(policy.state_dim))
    policy.mean_shift = policy.mean_shift + at_origin
    return policy


LOG_COLUMNS = (
    "env_step",
    "episode_return",
    "value_loss",
    "q1_loss",
    "q2_loss",
    "actor_loss",
    "gain_penalty",
    "K_available",
    "dare_residual",
)


@dataclass
class TrainResult:
    policy: GaussianPolicy
    gain: sysid.GainEstimate | None
    model: sysid.LinearModel | None
    sac: SacNets
    log_rows: list[dict]
    sysid_rows: list[dict]
    gain_available_step: int | None
    env: envs.EnvSpec
    config: TrainConfig


def rng_streams(seed: int):
    """Named child streams (env, agent, eval) from the single run seed."""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def _exploration_action(sample_action, env: envs.EnvSpec, floor_frac: float):
    """Rescale a policy draw up to the excitation floor on ||u||."""
    u = np.asarray(sample_action, dtype=float).copy()
    u_max = float(np.min(np.minimum(np.abs(env.action_low), env.action_high)))
    floor = floor_frac * u_max
    norm = float(np.linalg.norm(u))
    if norm == 0.0:
        u[0] = floor
    elif norm < floor:
        u *= floor / norm
    return u


def train(env: envs.EnvSpec, cfg: TrainConfig) -> TrainResult:
    """Run the full loop: collect, identify, compute the gain, update the
    SAC networks (gain-augmented actor once K is available), finalize."""
    cfg.validate()
    env_rng, agent_rng, _eval_rng = rng_streams(cfg.seed)
    sac = make_nets(env, cfg, agent_rng)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim)

    collector = (
        sysid.SysIdBuffer(cfg.eta, cfg.threshold_a, cfg.threshold_b)
        if cfg.sysid_enabled
        else None
    )
    a_true, b_true = envs.linearize_env(env)
    q_lqr = env.q_reward
    r_lqr = cfg.lqr_r_scale * np.eye(env.action_dim)

    model: sysid.LinearModel | None = None
    gain: sysid.GainEstimate | None = None
    gain_available_step: int | None = None
    samples_since_attempt = 0
    attempted = False  # throttles re-estimation after a failed attempt

    log_rows: list[dict] = []
    sysid_rows: list[dict] = []

    x = envs.env_reset(env, env_rng)
    ep_return, ep_len = 0.0, 0
    last_ep_return = math.nan

    for step in range(1, cfg.total_steps + 1):
        mode = collector.request_mode(x) if collector else sysid.ActionMode.POLICY_ONLY
        if mode == sysid.ActionMode.ZERO:
            u = np.zeros(env.action_dim)
        else:
            noise = agent_rng.standard_normal(env.action_dim)
            u, _, _ = nets.policy_sample(sac.actor, x, noise)
            if mode == sysid.ActionMode.EXPLORE:
                u = _exploration_action(u, env, cfg.explore_floor)

        result = envs.env_step(env, x, u)
        if collector:
            stored, _ = collector.maybe_collect(x, u, result.next_state)
            if stored:
                samples_since_attempt += 1
        buffer.push(
            Transition(
                state=x.copy(),
                action=np.asarray(u, dtype=float),
                reward=result.reward,
                next_state=result.next_state.copy(),
                terminated=result.terminated,
            )
        )
        ep_return += result.reward
        ep_len += 1
        if result.terminated or ep_len >= cfg.episode_cap:
            last_ep_return = ep_return
            ep_return, ep_len = 0.0, 0
            x = envs.env_reset(env, env_rng)
        else:
            x = result.next_state

        # identification: A first, then B, then the gain (K_available flips
        # exactly when both estimates exist and the Riccati solve converged)
        if collector:
            retry_ok = not attempted or samples_since_attempt >= cfg.sysid_retry_after
            if collector.ready_a and retry_ok:
                attempted, samples_since_attempt = True, 0
                try:
                    a_hat, res_a = sysid.estimate_a(collector, cfg.sysid_ridge)
                except linalg.SingularSystemError:
                    pass  # keep collecting into the sliding window
                else:
                    model = sysid.LinearModel(a_hat, None, (res_a, math.nan))
                    collector.advance()
                    attempted = False
                    sysid_rows.append(
                        sysid.sysid_report_row(collector, model, gain, a_true, b_true)
                    )
            elif collector.ready_b and retry_ok:
                attempted, samples_since_attempt = True, 0
                try:
                    b_hat, res_b = sysid.estimate_b(
                        collector, model.a_hat, cfg.sysid_ridge
                    )
                    candidate = sysid.LinearModel(
                        model.a_hat, b_hat, (model.fit_residuals[0], res_b)
                    )
                    gain = sysid.compute_gain(candidate, q_lqr, r_lqr, timestamp=step)
                    model = candidate
                except (linalg.SingularSystemError, sysid.GainUnavailableError):
                    pass  # retry once fresher samples arrive
                else:
                    gain_available_step = step
                    collector.advance()
                    sysid_rows.append(
                        sysid.sysid_report_row(collector, model, gain, a_true, b_true)
                    )
            elif (
                collector.phase == sysid.Phase.DONE
                and gain is not None
                and cfg.sysid_recompute_every > 0
                and step % cfg.sysid_recompute_every == 0
            ):
                b_hat, res_b = sysid.estimate_b(collector, model.a_hat, cfg.sysid_ridge)
                refreshed = sysid.LinearModel(
                    model.a_hat, b_hat, (model.fit_residuals[0], res_b)
                )
                try:
                    gain = sysid.compute_gain(refreshed, q_lqr, r_lqr, timestamp=step)
                    model = refreshed
                except sysid.GainUnavailableError:
                    pass  # keep the previous estimate
                else:
                    sysid_rows.append(
                        sysid.sysid_report_row(collector, model, gain, a_true, b_true)
                    )

        v_loss = q1_loss = q2_loss = a_loss = penalty = math.nan
        if len(buffer) >= cfg.batch_size:
            for _ in range(cfg.gradient_steps):
                v_loss, q1_loss, q2_loss, a_loss, penalty = gradient_step(
                    sac, buffer, cfg, agent_rng, gain
                )

        log_rows.append(
            {
                "env_step": step,
                "episode_return": last_ep_return,
                "value_loss": v_loss,
                "q1_loss": q1_loss,
                "q2_loss": q2_loss,
                "actor_loss": a_loss,
                "gain_penalty": penalty,
                "K_available": int(gain is not None),
                "dare_residual": gain.dare_residual if gain is not None else math.nan,
            }
        )

    finalize_policy(sac.actor)
    return TrainResult(
        policy=sac.actor,
        gain=gain,
        model=model,
        sac=sac,
        log_rows=log_rows,
        sysid_rows=sysid_rows,
        gain_available_step=gain_available_step,
        env=env,
        config=cfg,
    )
