"""Deterministic policy evaluation and Lyapunov-based certification.

Rollouts use the mean of the policy (never a stochastic draw), costs are
the quadratic form x^T Q x + u^T R u accumulated over time, and the
region-of-attraction estimate is a sublevel-set bisection of a quadratic
Lyapunov function checked by dense sampling. Reports from the sampler
are falsification-resistant evidence, explicitly labeled
certified-by-sampling; they are not a proof.

Policies may be GaussianPolicy instances or any callable x -> u.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import envs, linalg, nets, runio

ROA_METHOD_NOTE = (
    "certified by sampling: zero observed decrease violations on the sampled "
    "sublevel set; falsification-resistant evidence, not a proof"
)


def policy_action(policy, x: np.ndarray) -> np.ndarray:
    if isinstance(policy, nets.GaussianPolicy):
        return nets.policy_mean_action(policy, x)
    return np.asarray(policy(x), dtype=float)


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, n)
    actions: np.ndarray  # (T, m)
    rewards: np.ndarray  # (T,)
    accumulated_cost: np.ndarray  # (T,) running sums of x^T Q x + u^T R u
    terminated: bool


def rollout(policy, env: envs.EnvSpec, x0, horizon: int, q_cost, r_cost) -> Trajectory:
    """Deterministic rollout; stops at the horizon or on domain exit.

    accumulated_cost[k] = sum_{j<=k} x_j^T Q x_j + u_j^T R u_j with x_j
    the state the action u_j was taken from.
    """
    q_cost = np.asarray(q_cost, dtype=float)
    r_cost = np.asarray(r_cost, dtype=float)
    x = np.asarray(x0, dtype=float)
    states = [x.copy()]
    actions, rewards, acc = [], [], []
    total = 0.0
    terminated = False
    for _ in range(horizon):
        u = policy_action(policy, x)
        result = envs.env_step(env, x, u)
        total += float(x @ q_cost @ x + u @ r_cost @ u)
        acc.append(total)
        actions.append(u)
        rewards.append(result.reward)
        states.append(result.next_state.copy())
        if result.terminated:
            terminated = True
            break
        x = result.next_state
    n, m = env.state_dim, env.action_dim
    return Trajectory(
        states=np.array(states).reshape(-1, n),
        actions=np.array(actions).reshape(-1, m),
        rewards=np.asarray(rewards, dtype=float),
        accumulated_cost=np.asarray(acc, dtype=float),
        terminated=terminated,
    )


def default_cost_matrices(env: envs.EnvSpec, r_scale: float = 0.1):
    """The training pair: the reward's Q and R = r_scale * I."""
    return env.q_reward, r_scale * np.eye(env.action_dim)


@dataclass
class CostComparison:
    horizon: int
    names: list[str]
    mean_cost: dict = field(default_factory=dict)  # name -> (horizon,)
    std_cost: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)  # name -> scalar stats
    starts: np.ndarray = None  # type: ignore[assignment]


def compare_costs(
    policies: dict,
    env: envs.EnvSpec,
    n_starts: int,
    horizon: int,
    seed: int,
    q_cost=None,
    r_cost=None,
    final_window: int = 100,
) -> CostComparison:
    """Roll every policy out from one shared set of uniform starts.

    Curves of a rollout that ends early (domain exit) are padded flat with
    the last accumulated value, and its state norms with the exit norm, so
    failures stay visible in the aggregates. Summary per policy: final mean
    cost, settling step (first step after which the mean state norm stays
    below 1e-2), and the mean state norm over the final window.
    """
    if q_cost is None or r_cost is None:
        q_default, r_default = default_cost_matrices(env)
        q_cost = q_default if q_cost is None else q_cost
        r_cost = r_default if r_cost is None else r_cost
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    starts = np.stack([envs.env_reset(env, rng) for _ in range(n_starts)])

    comparison = CostComparison(horizon=horizon, names=list(policies), starts=starts)
    window = min(final_window, horizon)
    for name, policy in policies.items():
        curves = np.zeros((n_starts, horizon))
        norms = np.zeros((n_starts, horizon))
        for i in range(n_starts):
            traj = rollout(policy, env, starts[i], horizon, q_cost, r_cost)
            t = traj.accumulated_cost.size
            if t:
                curves[i, :t] = traj.accumulated_cost
                curves[i, t:] = traj.accumulated_cost[-1]
            state_norms = np.linalg.norm(traj.states[1:], axis=1)
            norms[i, :t] = state_norms
            norms[i, t:] = state_norms[-1] if t else np.linalg.norm(starts[i])
        comparison.mean_cost[name] = curves.mean(axis=0)
        comparison.std_cost[name] = curves.std(axis=0)
        mean_norms = norms.mean(axis=0)
        settled = np.nonzero(mean_norms > 1e-2)[0]
        settling_step = int(settled[-1]) + 2 if settled.size else 1
        comparison.summary[name] = {
            "final_mean_cost": float(curves[:, -1].mean()),
            "settling_step": min(settling_step, horizon),
            "final_window_mean_norm": float(norms[:, horizon - window :].mean()),
        }
    return comparison


def linearize_closed_loop(env: envs.EnvSpec, policy, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of x -> env_step(x, policy(x)).next_state
    at the origin; the policy must already be finalized (pi(0) = 0)."""
    n = env.state_dim
    a_cl = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        hi = envs.env_step(env, e, policy_action(policy, e)).next_state
        lo = envs.env_step(env, -e, policy_action(policy, -e)).next_state
        a_cl[:, j] = (hi - lo) / (2.0 * step)
    return a_cl


def quadratic_lyapunov(a_cl: np.ndarray, q_v: np.ndarray) -> np.ndarray:
    """P solving A_cl^T P A_cl - P + Q_v = 0, so V(x) = x^T P x decreases
    along the linearized closed loop. Raises LyapunovDivergenceError when
    A_cl is not Schur stable."""
    return linalg.solve_discrete_lyapunov(a_cl, q_v)


@dataclass
class RoaReport:
    p_lyap: np.ndarray
    level: float
    samples_checked: int
    violations: int
    certified_by_sampling: bool
    first_violation: np.ndarray | None = None
    method: str = ROA_METHOD_NOTE

    def to_dict(self) -> dict:
        return {
            "p_lyap": self.p_lyap.tolist(),
            "level": self.level,
            "samples_checked": self.samples_checked,
            "violations": self.violations,
            "certified_by_sampling": self.certified_by_sampling,
            "first_violation": None
            if self.first_violation is None
            else self.first_violation.tolist(),
            "method": self.method,
        }


def _max_level_in_domain(env: envs.EnvSpec, p: np.ndarray) -> float:
    """max of x^T P x over the domain box (attained at a vertex)."""
    n = env.state_dim
    best = 0.0
    for mask in range(2**n):
        v = np.where(
            [(mask >> i) & 1 for i in range(n)], env.domain_high, env.domain_low
        )
        best = max(best, float(v @ p @ v))
    return best


def _sample_sublevel(env, p, level, count, rng, max_tries_factor: int = 200):
    """Uniform samples from {x^T P x <= level} intersected with the domain,
    by rejection from the intersection of the bounding boxes."""
    p_inv = linalg.solve_spd(p, np.eye(p.shape[0]))
    half = np.sqrt(np.maximum(level * np.diag(p_inv), 0.0))
    low = np.maximum(-half, env.domain_low)
    high = np.minimum(half, env.domain_high)
    out = []
    tries = 0
    max_tries = max_tries_factor * count
    while len(out) < count and tries < max_tries:
        batch = rng.uniform(low, high, size=(256, env.state_dim))
        tries += 256
        vals = np.einsum("bi,ij,bj->b", batch, p, batch)
        for x in batch[vals <= level]:
            out.append(x)
            if len(out) == count:
                break
    return np.array(out).reshape(-1, env.state_dim)


def _check_decrease(env, policy, p, points, margin):
    """Count V(next) - V(x) <= -margin ||x||^2 failures; a next state that
    leaves the domain also counts as a violation."""
    violations = 0
    first = None
    for x in points:
        u = policy_action(policy, x)
        nxt = envs.env_step(env, x, u).next_state
        decrease_ok = float(nxt @ p @ nxt - x @ p @ x) <= -margin * float(x @ x)
        if not decrease_ok or not envs.in_domain(env, nxt):
            violations += 1
            if first is None:
                first = x.copy()
    return violations, first


def roa_estimate(
    env: envs.EnvSpec,
    policy,
    p: np.ndarray,
    grid_density: int = 10_000,
    margin: float = 1e-6,
    bisection_steps: int = 20,
    seed: int = 0,
    min_samples: int | None = None,
) -> RoaReport:
    """Largest Lyapunov level with zero sampled decrease violations.

    Bisects the level, drawing `grid_density` fresh points inside the
    sublevel set at each trial; the returned level is re-checked and its
    sample count and violation count are what the report certifies.
    """
    linalg.cholesky(p)  # P must be positive definite
    if min_samples is None:
        min_samples = grid_density
    root = np.random.SeedSequence(seed)
    level_hi = _max_level_in_domain(env, p)

    def feasible(level, rng):
        points = _sample_sublevel(env, p, level, grid_density, rng)
        if points.shape[0] == 0:
            return False, 0, None
        violations, first = _check_decrease(env, policy, p, points, margin)
        return violations == 0, points.shape[0], first

    streams = iter(np.random.default_rng(s) for s in root.spawn(bisection_steps + 2))
    lo, hi = 0.0, level_hi
    first_violation = None
    ok, _, first = feasible(hi, next(streams))
    if ok:
        lo = hi
    else:
        first_violation = first
        for _ in range(bisection_steps):
            mid = 0.5 * (lo + hi)
            ok, count, first = feasible(mid, next(streams))
            if ok and count >= min_samples:
                lo = mid
            else:
                hi = mid
                if first is not None:
                    first_violation = first

    if lo <= 0.0:
        return RoaReport(
            p_lyap=p,
            level=0.0,
            samples_checked=0,
            violations=1,
            certified_by_sampling=False,
            first_violation=first_violation,
        )
    final_points = _sample_sublevel(env, p, lo, grid_density, next(streams))
    violations, first = _check_decrease(env, policy, p, final_points, margin)
    certified = violations == 0 and final_points.shape[0] >= min_samples
    return RoaReport(
        p_lyap=p,
        level=float(lo),
        samples_checked=int(final_points.shape[0]),
        violations=int(violations),
        certified_by_sampling=bool(certified),
        first_violation=first if violations else first_violation if not certified else None,
    )


# ---------------------------------------------------------------------------
# CSV emission (the eval module's file contracts)


def trajectory_rows(traj: Trajectory, env: envs.EnvSpec, q_cost, r_cost):
    rows = []
    for k in range(traj.actions.shape[0]):
        x, u = traj.states[k], traj.actions[k]
        row = {"step": k}
        for i in range(env.state_dim):
            row[f"x_{i + 1}"] = x[i]
        for i in range(env.action_dim):
            row[f"u_{i + 1}"] = u[i]
        row["reward"] = traj.rewards[k]
        row["step_cost"] = float(x @ q_cost @ x + u @ r_cost @ u)
        row["accumulated_cost"] = traj.accumulated_cost[k]
        rows.append(row)
    return rows


def trajectory_columns(env: envs.EnvSpec):
    return (
        ["step"]
        + [f"x_{i + 1}" for i in range(env.state_dim)]
        + [f"u_{i + 1}" for i in range(env.action_dim)]
        + ["reward", "step_cost", "accumulated_cost"]
    )


def write_trajectory_csv(path, traj: Trajectory, env: envs.EnvSpec, q_cost, r_cost):
    runio.write_csv(path, trajectory_columns(env), trajectory_rows(traj, env, q_cost, r_cost))


COST_CURVE_COLUMNS = ("step", "policy_name", "mean_cost", "std_cost")


def write_cost_curves_csv(path, comparison: CostComparison):
    rows = []
    for name in comparison.names:
        mean = comparison.mean_cost[name]
        std = comparison.std_cost[name]
        for k in range(comparison.horizon):
            rows.append(
                {
                    "step": k,
                    "policy_name": name,
                    "mean_cost": mean[k],
                    "std_cost": std[k],
                }
            )
    runio.write_csv(path, COST_CURVE_COLUMNS, rows)
