"""Discrete-time stabilization environments.

Physical benchmarks (inverted pendulum, cartpole, planar quadrotor) are
continuous rigid-body models discretized with classical RK4 under
zero-order hold; a linear test plant exposes an arbitrary discrete map
x' = A x + B u through the same interface. The origin is the equilibrium
of every environment and zero action is always admissible.

Reward: scale * (r_const - x^T Q x) while the next state stays inside
the domain box; leaving the box ends the episode with a single
scale * (-terminal_penalty) reward. Q defaults to a diagonal normalized
so the in-domain state cost never exceeds 1.

The paper-facing semantics live in `env_step`; the dynamics equations
and all physical parameters below are documented package defaults, every
one overridable per run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import linalg


class EnvError(Exception):
    pass


class DomainError(EnvError):
    """env_step was entered with a state outside the domain box."""


class NonFiniteStateError(EnvError):
    """Integration produced NaN/Inf."""


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    dt: float
    domain_low: np.ndarray
    domain_high: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    q_reward: np.ndarray
    r_const: float
    terminal_penalty: float
    reward_scale: float
    init_low: np.ndarray
    init_high: np.ndarray
    params: dict = field(default_factory=dict)
    transition: Callable[[np.ndarray, np.ndarray], np.ndarray] = None  # type: ignore

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not (np.all(self.domain_low < 0) and np.all(self.domain_high > 0)):
            raise ValueError("origin must be interior to the domain box")
        if not (np.all(self.action_low < 0) and np.all(self.action_high > 0)):
            raise ValueError("zero action must be interior to the action box")
        if np.any(self.init_low < self.domain_low) or np.any(
            self.init_high > self.domain_high
        ):
            raise ValueError("init box must be contained in the domain box")
        linalg.cholesky(self.q_reward)  # Q must be positive definite
        if self.terminal_penalty < 0:
            raise ValueError("terminal_penalty must be >= 0")


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    terminated: bool
    info: dict


def rk4_step(derivative, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Classical 4th-order Runge-Kutta step with u held constant."""
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    k1 = derivative(x, u)
    k2 = derivative(x + 0.5 * dt * k1, u)
    k3 = derivative(x + 0.5 * dt * k2, u)
    k4 = derivative(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(out).all():
        raise NonFiniteStateError("RK4 produced a non-finite state")
    return out


def in_domain(spec: EnvSpec, x: np.ndarray) -> bool:
    return bool(np.all(x >= spec.domain_low) and np.all(x <= spec.domain_high))


def env_step(spec: EnvSpec, x: np.ndarray, u: np.ndarray) -> StepResult:
    """One transition with the terminal-condition reward semantics.

    The action is clipped into the action box before integration. After
    a terminated step the episode is over; the caller must reset rather
    than keep stepping (the post-exit zero rewards are realized by
    termination, never emitted).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not in_domain(spec, x):
        raise DomainError(f"state {x} is outside the domain of {spec.name}")
    u_clipped = np.clip(u, spec.action_low, spec.action_high)
    nxt = spec.transition(x, u_clipped)
    if not np.isfinite(nxt).all():
        raise NonFiniteStateError(f"{spec.name} transition produced non-finite state")
    raw_cost = float(x @ spec.q_reward @ x)
    if in_domain(spec, nxt):
        reward = spec.reward_scale * (spec.r_const - raw_cost)
        terminated = False
    else:
        reward = spec.reward_scale * (-spec.terminal_penalty)
        terminated = True
    return StepResult(
        next_state=nxt, reward=reward, terminated=terminated, info={"raw_cost": raw_cost}
    )


def env_reset(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    """x0 ~ uniform(init box), drawn from the provided stream."""
    return rng.uniform(spec.init_low, spec.init_high)


def linearize_env(spec: EnvSpec, step: float = 1e-6):
    """(A, B) of the one-step map at (0, 0) by central finite differences."""
    n, m = spec.state_dim, spec.action_dim
    a = np.zeros((n, n))
    b = np.zeros((n, m))
    zero_x = np.zeros(n)
    zero_u = np.zeros(m)
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        a[:, j] = (spec.transition(e, zero_u) - spec.transition(-e, zero_u)) / (
            2.0 * step
        )
    for j in range(m):
        e = np.zeros(m)
        e[j] = step
        b[:, j] = (spec.transition(zero_x, e) - spec.transition(zero_x, -e)) / (
            2.0 * step
        )
    return a, b


# ---------------------------------------------------------------------------
# dynamics


def pendulum_dynamics(x, u, mass=0.15, length=0.5, gravity=9.81):
    """Inverted pendulum about the upright: state (theta, theta_dot),
    action torque. theta'' = (g/l) sin(theta) + u / (m l^2)."""
    theta, omega = x
    alpha = (gravity / length) * np.sin(theta) + u[0] / (mass * length * length)
    return np.array([omega, alpha])


def cartpole_dynamics(x, u, cart_mass=1.0, pole_mass=0.1, half_length=0.5, gravity=9.81):
    """Pole balanced on a cart: state (pos, vel, theta, theta_dot), action
    horizontal force; theta = 0 is upright."""
    _, vel, theta, omega = x
    force = u[0]
    total = cart_mass + pole_mass
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    temp = (force + pole_mass * half_length * omega * omega * sin_t) / total
    alpha = (gravity * sin_t - cos_t * temp) / (
        half_length * (4.0 / 3.0 - pole_mass * cos_t * cos_t / total)
    )
    acc = temp - pole_mass * half_length * alpha * cos_t / total
    return np.array([vel, acc, omega, alpha])


def quad2d_dynamics(x, u, mass=0.5, inertia=0.01, arm=0.1, gravity=9.81):
    """Planar quadrotor: state (px, pz, theta, vx, vz, omega), action
    per-rotor thrust deviations from hover, so f(0, 0) = 0."""
    _, _, theta, vx, vz, omega = x
    hover = 0.5 * mass * gravity
    t1, t2 = hover + u[0], hover + u[1]
    thrust = t1 + t2
    ax = -thrust * np.sin(theta) / mass
    az = thrust * np.cos(theta) / mass - gravity
    alpha = arm * (t1 - t2) / inertia
    return np.array([vx, vz, omega, ax, az, alpha])


# ---------------------------------------------------------------------------
# environment builders


def _normalized_q(domain_low, domain_high) -> np.ndarray:
    """Diagonal Q with max_{x in D} x^T Q x = 1."""
    half = np.maximum(np.abs(domain_low), np.abs(domain_high))
    n = half.size
    return np.diag(1.0 / (n * half * half))


def _build(
    name,
    derivative,
    dt,
    domain_low,
    domain_high,
    action_low,
    action_high,
    init_low,
    init_high,
    params,
    r_const,
    terminal_penalty,
    reward_scale,
    q_diag=None,
):
    domain_low = np.asarray(domain_low, dtype=float)
    domain_high = np.asarray(domain_high, dtype=float)
    if q_diag is None:
        q = _normalized_q(domain_low, domain_high)
    else:
        q = np.diag(np.asarray(q_diag, dtype=float))

    def transition(x, u):
        return rk4_step(derivative, np.asarray(x, dtype=float), u, dt)

    return EnvSpec(
        name=name,
        state_dim=domain_low.size,
        action_dim=np.asarray(action_low).size,
        dt=dt,
        domain_low=domain_low,
        domain_high=domain_high,
        action_low=np.asarray(action_low, dtype=float),
        action_high=np.asarray(action_high, dtype=float),
        q_reward=q,
        r_const=r_const,
        terminal_penalty=terminal_penalty,
        reward_scale=reward_scale,
        init_low=np.asarray(init_low, dtype=float),
        init_high=np.asarray(init_high, dtype=float),
        params=dict(params),
        transition=transition,
    )


def make_pendulum(
    dt=0.02,
    mass=0.15,
    length=0.5,
    gravity=9.81,
    torque_max=6.0,
    domain_low=(-2.0 * np.pi, -8.0),
    domain_high=(2.0 * np.pi, 8.0),
    init_low=(-1.0, -1.0),
    init_high=(1.0, 1.0),
    r_const=1.0,
    terminal_penalty=10.0,
    reward_scale=2.0,
    q_diag=None,
) -> EnvSpec:
    params = {"mass": mass, "length": length, "gravity": gravity}

    def derivative(x, u):
        return pendulum_dynamics(x, u, mass=mass, length=length, gravity=gravity)

    return _build(
        "pendulum",
        derivative,
        dt,
        domain_low,
        domain_high,
        (-torque_max,),
        (torque_max,),
        init_low,
        init_high,
        params,
        r_const,
        terminal_penalty,
        reward_scale,
        q_diag,
    )


def make_cartpole(
    dt=0.02,
    cart_mass=1.0,
    pole_mass=0.1,
    half_length=0.5,
    gravity=9.81,
    force_max=10.0,
    domain_low=(-2.4, -5.0, -np.pi / 3.0, -5.0),
    domain_high=(2.4, 5.0, np.pi / 3.0, 5.0),
    init_low=(-0.5, -0.5, -0.2, -0.5),
    init_high=(0.5, 0.5, 0.2, 0.5),
    r_const=1.0,
    terminal_penalty=10.0,
    reward_scale=2.0,
    q_diag=None,
) -> EnvSpec:
    params = {
        "cart_mass": cart_mass,
        "pole_mass": pole_mass,
        "half_length": half_length,
        "gravity": gravity,
    }

    def derivative(x, u):
        return cartpole_dynamics(
            x,
            u,
            cart_mass=cart_mass,
            pole_mass=pole_mass,
            half_length=half_length,
            gravity=gravity,
        )

    return _build(
        "cartpole",
        derivative,
        dt,
        domain_low,
        domain_high,
        (-force_max,),
        (force_max,),
        init_low,
        init_high,
        params,
        r_const,
        terminal_penalty,
        reward_scale,
        q_diag,
    )


def make_quad2d(
    dt=0.02,
    mass=0.5,
    inertia=0.01,
    arm=0.1,
    gravity=9.81,
    thrust_max=3.0,
    domain_low=(-2.0, -2.0, -np.pi / 3.0, -4.0, -4.0, -4.0),
    domain_high=(2.0, 2.0, np.pi / 3.0, 4.0, 4.0, 4.0),
    init_low=(-0.5, -0.5, -0.2, -0.5, -0.5, -0.5),
    init_high=(0.5, 0.5, 0.2, 0.5, 0.5, 0.5),
    r_const=1.0,
    terminal_penalty=10.0,
    reward_scale=2.0,
    q_diag=None,
) -> EnvSpec:
    params = {"mass": mass, "inertia": inertia, "arm": arm, "gravity": gravity}

    def derivative(x, u):
        return quad2d_dynamics(x, u, mass=mass, inertia=inertia, arm=arm, gravity=gravity)

    return _build(
        "quad2d",
        derivative,
        dt,
        domain_low,
        domain_high,
        (-thrust_max, -thrust_max),
        (thrust_max, thrust_max),
        init_low,
        init_high,
        params,
        r_const,
        terminal_penalty,
        reward_scale,
        q_diag,
    )


def make_linear_plant(
    a,
    b,
    domain_low=None,
    domain_high=None,
    action_low=None,
    action_high=None,
    init_low=None,
    init_high=None,
    r_const=1.0,
    terminal_penalty=10.0,
    reward_scale=2.0,
    q_diag=None,
    name="linear",
) -> EnvSpec:
    """Discrete plant x' = A x + B u exposed through the env interface."""
    a = linalg.as_matrix(a, "A")
    b = linalg.as_matrix(b, "B")
    n, m = a.shape[0], b.shape[1]
    domain_low = np.full(n, -2.0) if domain_low is None else np.asarray(domain_low, float)
    domain_high = np.full(n, 2.0) if domain_high is None else np.asarray(domain_high, float)
    action_low = np.full(m, -5.0) if action_low is None else np.asarray(action_low, float)
    action_high = np.full(m, 5.0) if action_high is None else np.asarray(action_high, float)
    init_low = 0.5 * domain_low if init_low is None else np.asarray(init_low, float)
    init_high = 0.5 * domain_high if init_high is None else np.asarray(init_high, float)
    q = _normalized_q(domain_low, domain_high) if q_diag is None else np.diag(
        np.asarray(q_diag, dtype=float)
    )

    def transition(x, u):
        return a @ np.asarray(x, dtype=float) + b @ np.asarray(u, dtype=float)

    return EnvSpec(
        name=name,
        state_dim=n,
        action_dim=m,
        dt=1.0,
        domain_low=domain_low,
        domain_high=domain_high,
        action_low=action_low,
        action_high=action_high,
        q_reward=q,
        r_const=r_const,
        terminal_penalty=terminal_penalty,
        reward_scale=reward_scale,
        init_low=init_low,
        init_high=init_high,
        params={"a": a.tolist(), "b": b.tolist()},
        transition=transition,
    )


ENV_BUILDERS = {
    "pendulum": make_pendulum,
    "cartpole": make_cartpole,
    "quad2d": make_quad2d,
    "linear": make_linear_plant,
}


def make_env(name: str, **overrides) -> EnvSpec:
    if name not in ENV_BUILDERS:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(ENV_BUILDERS)}")
    if name == "linear":
        overrides.setdefault("a", [[0.9]])
        overrides.setdefault("b", [[0.1]])
    return ENV_BUILDERS[name](**overrides)
