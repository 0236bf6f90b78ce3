"""Minimal differentiable-network engine.

Tanh multilayer perceptrons with exact reverse-mode gradients, Adam, a
squashed-Gaussian policy head, analytic input Jacobians of the
deterministic action map, and exact gradients of Jacobian-matching
penalties (the second-order path used by the gain-augmented actor loss).

Everything is float64 numpy, single-threaded, and deterministic given
the caller's random streams: the engine itself never draws randomness
except in the initializers, which take an explicit Generator.

Parameter lists: a network's parameters are exposed as a flat list of
arrays (weights and biases interleaved, layer by layer); gradients are
parallel lists of the same shapes. Adam state mirrors that layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

POLICY_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# plain MLPs (tanh hidden activations, identity output)


@dataclass
class Mlp:
    weights: list[np.ndarray]  # each (out_dim, in_dim)
    biases: list[np.ndarray]  # each (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_layer(out_dim: int, in_dim: int, rng: np.random.Generator):
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    bound = 1.0 / math.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    b = np.zeros(out_dim)
    return w, b


def mlp_init(dims: list[int], rng: np.random.Generator) -> Mlp:
    weights, biases = [], []
    for in_dim, out_dim in zip(dims[:-1], dims[1:]):
        w, b = init_layer(out_dim, in_dim, rng)
        weights.append(w)
        biases.append(b)
    return Mlp(weights=weights, biases=biases)


def mlp_forward_batch(net: Mlp, x: np.ndarray):
    """Batched forward pass; returns (output, cache of layer inputs)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"expected input of shape (B, {net.in_dim}), got {x.shape}")
    inputs = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        if i < last:
            h = np.tanh(z)
            inputs.append(h)
        else:
            h = z
    return h, inputs


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Single-vector forward pass y = W_L tanh(... tanh(W_1 x + b_1) ...) + b_L."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.in_dim,):
        raise ValueError(f"expected input of shape ({net.in_dim},), got {x.shape}")
    y, _ = mlp_forward_batch(net, x[None, :])
    return y[0]


def mlp_backward(net: Mlp, cache: list[np.ndarray], upstream: np.ndarray):
    """Exact reverse-mode gradients for a batch.

    `upstream` is d(loss)/d(output), shape (B, out_dim); returns
    (parameter gradients in params() order, d(loss)/d(input)).
    """
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (cache[0].shape[0], net.out_dim):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match batch "
            f"({cache[0].shape[0]}, {net.out_dim})"
        )
    n_layers = len(net.weights)
    grads: list = [None] * (2 * n_layers)
    dz = upstream
    for i in range(n_layers - 1, -1, -1):
        h_in = cache[i]
        grads[2 * i] = dz.T @ h_in
        grads[2 * i + 1] = dz.sum(axis=0)
        dx = dz @ net.weights[i]
        if i > 0:
            dz = dx * (1.0 - h_in * h_in)
    return grads, dx


def mlp_input_jacobian(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Analytic Jacobian d(output)/d(input) at a single point.

    J = W_L diag(1 - tanh^2 z_{L-1}) W_{L-1} ... diag(1 - tanh^2 z_1) W_1.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (net.in_dim,):
        raise ValueError(f"expected input of shape ({net.in_dim},), got {x.shape}")
    _, cache = mlp_forward_batch(net, x[None, :])
    jac = net.weights[-1].copy()
    for i in range(len(net.weights) - 2, -1, -1):
        h = cache[i + 1][0]  # tanh activations of layer i
        jac = (jac * (1.0 - h * h)) @ net.weights[i]
    return jac


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_update(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float
) -> AdamState:
    """Standard bias-corrected Adam step; mutates params and state in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        p[...] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# parameter vector helpers (finite differences, serialization of tests)


def params_to_vector(params: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def set_params_from_vector(params: list[np.ndarray], vec: np.ndarray) -> None:
    offset = 0
    for p in params:
        p[...] = vec[offset : offset + p.size].reshape(p.shape)
        offset += p.size
    if offset != vec.size:
        raise ValueError(f"vector has {vec.size} entries, expected {offset}")


# ---------------------------------------------------------------------------
# squashed-Gaussian policy


@dataclass
class GaussianPolicy:
    """Tanh-trunk network with Gaussian head squashed into an action box.

    The stochastic action is y = a * tanh(mu(x) + sigma(x) * noise) + b
    with a = bound_scale (componentwise half-range) and b = bound_offset
    (box center); mean_shift is zero until finalization, after which the
    deterministic map is shifted so it vanishes at the origin.
    """

    trunk: Mlp
    mean_w: np.ndarray
    mean_b: np.ndarray
    log_std_w: np.ndarray
    log_std_b: np.ndarray
    log_std_min: float
    log_std_max: float
    bound_scale: np.ndarray
    bound_offset: np.ndarray
    mean_shift: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.mean_shift is None:
            self.mean_shift = np.zeros_like(self.bound_offset)
        if not np.all(self.bound_scale > 0):
            raise ValueError("bound_scale must be strictly positive componentwise")

    @property
    def state_dim(self) -> int:
        return self.trunk.in_dim

    @property
    def action_dim(self) -> int:
        return self.mean_w.shape[0]

    @property
    def action_low(self) -> np.ndarray:
        return self.bound_offset - self.bound_scale

    @property
    def action_high(self) -> np.ndarray:
        return self.bound_offset + self.bound_scale

    def params(self) -> list[np.ndarray]:
        return self.trunk.params() + [
            self.mean_w,
            self.mean_b,
            self.log_std_w,
            self.log_std_b,
        ]


def policy_init(
    state_dim: int,
    action_dim: int,
    hidden_dims: list[int],
    action_low: np.ndarray,
    action_high: np.ndarray,
    rng: np.random.Generator,
    log_std_min: float = -20.0,
    log_std_max: float = 2.0,
) -> GaussianPolicy:
    action_low = np.asarray(action_low, dtype=float)
    action_high = np.asarray(action_high, dtype=float)
    trunk = mlp_init([state_dim] + list(hidden_dims), rng)
    mean_w, mean_b = init_layer(action_dim, hidden_dims[-1], rng)
    log_std_w, log_std_b = init_layer(action_dim, hidden_dims[-1], rng)
    return GaussianPolicy(
        trunk=trunk,
        mean_w=mean_w,
        mean_b=mean_b,
        log_std_w=log_std_w,
        log_std_b=log_std_b,
        log_std_min=log_std_min,
        log_std_max=log_std_max,
        bound_scale=0.5 * (action_high - action_low),
        bound_offset=0.5 * (action_high + action_low),
    )


def policy_trunk_features(policy: GaussianPolicy, x: np.ndarray) -> list[np.ndarray]:
    """Activations [x, tanh(z_1), ..., tanh(z_L)] of the trunk (batched)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != policy.state_dim:
        raise ValueError(
            f"expected input of shape (B, {policy.state_dim}), got {x.shape}"
        )
    hs = [x]
    for w, b in zip(policy.trunk.weights, policy.trunk.biases):
        hs.append(np.tanh(hs[-1] @ w.T + b))
    return hs


def policy_heads(policy: GaussianPolicy, x: np.ndarray):
    """Batched (mu, raw log_std, trunk activations)."""
    hs = policy_trunk_features(policy, x)
    feats = hs[-1]
    mu = feats @ policy.mean_w.T + policy.mean_b
    ls_raw = feats @ policy.log_std_w.T + policy.log_std_b
    return mu, ls_raw, hs


def policy_head_backward(
    policy: GaussianPolicy,
    hs: list[np.ndarray],
    d_mu: np.ndarray,
    d_ls_raw: np.ndarray,
) -> list[np.ndarray]:
    """Backprop upstream gradients on (mu, raw log_std) into params() order."""
    feats = hs[-1]
    g_mean_w = d_mu.T @ feats
    g_mean_b = d_mu.sum(axis=0)
    g_ls_w = d_ls_raw.T @ feats
    g_ls_b = d_ls_raw.sum(axis=0)
    d_feat = d_mu @ policy.mean_w + d_ls_raw @ policy.log_std_w

    n_layers = len(policy.trunk.weights)
    trunk_grads: list = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        h_out = hs[i + 1]
        dz = d_feat * (1.0 - h_out * h_out)
        trunk_grads[2 * i] = dz.T @ hs[i]
        trunk_grads[2 * i + 1] = dz.sum(axis=0)
        d_feat = dz @ policy.trunk.weights[i]
    return trunk_grads + [g_mean_w, g_mean_b, g_ls_w, g_ls_b]


def log_sech2(w: np.ndarray) -> np.ndarray:
    """log(1 - tanh^2 w), computed without underflow for large |w|."""
    aw = np.abs(w)
    return 2.0 * (math.log(2.0) - aw - np.log1p(np.exp(-2.0 * aw)))


@dataclass
class PolicySample:
    """One reparameterized draw per batch row, with everything the actor
    gradient needs: presquash w, tanh(w), sigma, and the clamp mask."""

    action: np.ndarray
    log_prob: np.ndarray
    presquash: np.ndarray
    tanh_w: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray
    ls_raw: np.ndarray
    clamp_pass: np.ndarray
    hs: list[np.ndarray]
    noise: np.ndarray


def policy_sample_batch(
    policy: GaussianPolicy, x: np.ndarray, noise: np.ndarray
) -> PolicySample:
    """Reparameterized squashed-Gaussian sampling for a batch of states.

    log_prob applies the tanh change-of-variables correction
    -sum_i log(a_i (1 - tanh^2 w_i)) on top of the Gaussian density.
    """
    mu, ls_raw, hs = policy_heads(policy, x)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != mu.shape:
        raise ValueError(f"noise shape {noise.shape} does not match {mu.shape}")
    ls = np.clip(ls_raw, policy.log_std_min, policy.log_std_max)
    clamp_pass = (ls_raw >= policy.log_std_min) & (ls_raw <= policy.log_std_max)
    sigma = np.exp(ls)
    w = mu + sigma * noise
    t = np.tanh(w)
    action = policy.bound_scale * t + policy.bound_offset
    if np.any(policy.mean_shift != 0.0):
        action = np.clip(
            action - policy.mean_shift, policy.action_low, policy.action_high
        )
    log_prob = np.sum(
        -0.5 * LOG_2PI
        - ls
        - 0.5 * noise * noise
        - np.log(policy.bound_scale)
        - log_sech2(w),
        axis=1,
    )
    return PolicySample(
        action=action,
        log_prob=log_prob,
        presquash=w,
        tanh_w=t,
        sigma=sigma,
        mu=mu,
        ls_raw=ls_raw,
        clamp_pass=clamp_pass,
        hs=hs,
        noise=noise,
    )


def policy_sample(policy: GaussianPolicy, x: np.ndarray, noise: np.ndarray):
    """Single-state draw; returns (action, log_prob, presquash w)."""
    x = np.asarray(x, dtype=float)
    noise = np.asarray(noise, dtype=float)
    s = policy_sample_batch(policy, x[None, :], noise[None, :])
    return s.action[0], float(s.log_prob[0]), s.presquash[0]


def policy_mean_action_raw(policy: GaussianPolicy, x: np.ndarray) -> np.ndarray:
    """Deterministic action map before shift/clip: a * tanh(mu(x)) + b."""
    x = np.asarray(x, dtype=float)
    mu, _, _ = policy_heads(policy, x[None, :])
    return policy.bound_scale * np.tanh(mu[0]) + policy.bound_offset


def policy_mean_action(policy: GaussianPolicy, x: np.ndarray) -> np.ndarray:
    """Deterministic evaluation action: a * tanh(mu(x)) + b - mean_shift,
    clipped into the action box."""
    raw = policy_mean_action_raw(policy, x)
    return np.clip(raw - policy.mean_shift, policy.action_low, policy.action_high)


def action_jacobian(policy: GaussianPolicy, x: np.ndarray) -> np.ndarray:
    """Analytic Jacobian of the deterministic action map at one state.

    The mean_shift is constant so finalization leaves this unchanged.
    """
    x = np.asarray(x, dtype=float)
    mu, _, hs = policy_heads(policy, x[None, :])
    t = np.tanh(mu[0])
    jac = policy.mean_w.copy()
    for i in range(len(policy.trunk.weights) - 1, -1, -1):
        h = hs[i + 1][0]
        jac = (jac * (1.0 - h * h)) @ policy.trunk.weights[i]
    return (policy.bound_scale * (1.0 - t * t))[:, None] * jac


def action_jacobian_penalty_and_grads(
    policy: GaussianPolicy, states: np.ndarray, target: np.ndarray
):
    """sum_i ||J(x_i) - target||_F over a batch of states, with exact
    gradients w.r.t. the trunk and mean-head parameters.

    J is the Jacobian of the deterministic action map, a product of the
    layer weight matrices and tanh-derivative diagonals; the gradient
    therefore carries both the direct factor terms and the second-order
    terms through every diagonal's dependence on the activations.
    """
    states = np.asarray(states, dtype=float)
    target = np.asarray(target, dtype=float)
    batch = states.shape[0]
    n = policy.state_dim

    hs = policy_trunk_features(policy, states)
    feats = hs[-1]
    mu = feats @ policy.mean_w.T + policy.mean_b
    t_m = np.tanh(mu)
    s_m = 1.0 - t_m * t_m
    c_m = policy.bound_scale * s_m  # (B, m)

    # forward product chain F_i = diag(1 - h_i^2) W_i F_{i-1}
    n_layers = len(policy.trunk.weights)
    fs = [np.broadcast_to(np.eye(n), (batch, n, n))]
    gs: list = [None]
    for i in range(1, n_layers + 1):
        g = np.matmul(policy.trunk.weights[i - 1], fs[i - 1])
        s = 1.0 - hs[i] * hs[i]
        fs.append(s[:, :, None] * g)
        gs.append(g)
    g_m = np.matmul(policy.mean_w, fs[n_layers])  # (B, m, n)
    jac = c_m[:, :, None] * g_m

    resid = jac - target[None, :, :]
    norms = np.sqrt((resid * resid).sum(axis=(1, 2)))
    penalty = float(norms.sum())
    safe = np.where(norms > 0.0, norms, 1.0)
    j_hat = resid / safe[:, None, None]
    j_hat[norms == 0.0] = 0.0

    grads = [np.zeros_like(p) for p in policy.params()]
    # activation-gradient injections collected from each diagonal factor
    injections = [np.zeros_like(h) for h in hs]

    # output squash diagonal c_m = a * (1 - tanh^2 mu)
    d_cm = (j_hat * g_m).sum(axis=2)
    d_mu = (policy.bound_scale * d_cm) * (-2.0 * t_m * s_m)
    ghat_m = c_m[:, :, None] * j_hat

    # mean head: direct factor term plus standard backprop of d_mu
    idx_mean_w = 2 * n_layers
    grads[idx_mean_w] += np.einsum("bmn,bjn->mj", ghat_m, fs[n_layers])
    grads[idx_mean_w] += d_mu.T @ feats
    grads[idx_mean_w + 1] += d_mu.sum(axis=0)
    injections[n_layers] += d_mu @ policy.mean_w

    # trunk chain, walking the product right-to-left
    fhat = np.matmul(policy.mean_w.T, ghat_m)
    for i in range(n_layers, 0, -1):
        s = 1.0 - hs[i] * hs[i]
        s_hat = (fhat * gs[i]).sum(axis=2)
        injections[i] += (-2.0 * hs[i]) * s_hat
        ghat_i = s[:, :, None] * fhat
        grads[2 * (i - 1)] += np.einsum("bdn,bjn->dj", ghat_i, fs[i - 1])
        fhat = np.matmul(policy.trunk.weights[i - 1].T, ghat_i)

    # sweep the collected activation gradients down through the trunk
    carry = np.zeros_like(feats)
    for i in range(n_layers, 0, -1):
        carry = carry + injections[i]
        dz = carry * (1.0 - hs[i] * hs[i])
        grads[2 * (i - 1)] += dz.T @ hs[i - 1]
        grads[2 * (i - 1) + 1] += dz.sum(axis=0)
        carry = dz @ policy.trunk.weights[i - 1]

    return penalty, grads


def origin_action_norm_and_grads(policy: GaussianPolicy):
    """||a tanh(mu(0)) + b - mean_shift|| and its exact parameter gradients."""
    x0 = np.zeros((1, policy.state_dim))
    mu, _, hs = policy_heads(policy, x0)
    t = np.tanh(mu)
    y = policy.bound_scale * t[0] + policy.bound_offset - policy.mean_shift
    norm = float(np.linalg.norm(y))
    if norm == 0.0:
        return 0.0, [np.zeros_like(p) for p in policy.params()]
    d_y = y / norm
    d_mu = (d_y * policy.bound_scale * (1.0 - t[0] * t[0]))[None, :]
    grads = policy_head_backward(policy, hs, d_mu, np.zeros_like(d_mu))
    return norm, grads


def gain_penalty_fd_grads(
    policy: GaussianPolicy,
    states: np.ndarray,
    target: np.ndarray,
    step: float = 1e-6,
):
    """Central-difference fallback for the full gain penalty gradient
    (Jacobian matching + origin norm); slow, kept for cross-checks."""

    def total() -> float:
        pen, _ = action_jacobian_penalty_and_grads(policy, states, target)
        origin, _ = origin_action_norm_and_grads(policy)
        return pen + origin

    params = policy.params()
    vec = params_to_vector(params)
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        saved = vec[i]
        vec[i] = saved + step
        set_params_from_vector(params, vec)
        hi = total()
        vec[i] = saved - step
        set_params_from_vector(params, vec)
        lo = total()
        vec[i] = saved
        grad[i] = (hi - lo) / (2.0 * step)
    set_params_from_vector(params, vec)
    out = [np.zeros_like(p) for p in params]
    set_params_from_vector(out, grad)
    return out


# ---------------------------------------------------------------------------
# serialization (versioned JSON, bit-exact round trip for finite doubles)


def policy_to_dict(policy: GaussianPolicy) -> dict:
    weights = policy.trunk.weights + [policy.mean_w, policy.log_std_w]
    biases = policy.trunk.biases + [policy.mean_b, policy.log_std_b]
    for arr in weights + biases:
        if not np.isfinite(arr).all():
            raise ValueError("cannot serialize non-finite parameters")
    return {
        "version": POLICY_FORMAT_VERSION,
        "state_dim": policy.state_dim,
        "action_dim": policy.action_dim,
        "layer_dims": [policy.state_dim] + [w.shape[0] for w in policy.trunk.weights],
        "weights": [w.ravel().tolist() for w in weights],
        "biases": [b.tolist() for b in biases],
        "log_std_clamp": [policy.log_std_min, policy.log_std_max],
        "bound_scale": policy.bound_scale.tolist(),
        "bound_offset": policy.bound_offset.tolist(),
        "mean_shift": policy.mean_shift.tolist(),
    }


def policy_from_dict(doc: dict) -> GaussianPolicy:
    if doc.get("version") != POLICY_FORMAT_VERSION:
        raise ValueError(f"unsupported policy format version {doc.get('version')!r}")
    state_dim = int(doc["state_dim"])
    action_dim = int(doc["action_dim"])
    dims = [int(d) for d in doc["layer_dims"]]
    if dims[0] != state_dim:
        raise ValueError("layer_dims[0] must equal state_dim")
    shapes = list(zip(dims[1:], dims[:-1]))
    shapes += [(action_dim, dims[-1]), (action_dim, dims[-1])]
    if len(doc["weights"]) != len(shapes) or len(doc["biases"]) != len(shapes):
        raise ValueError("weights/biases length does not match layer_dims")
    weights = [
        np.asarray(flat, dtype=float).reshape(shape)
        for flat, shape in zip(doc["weights"], shapes)
    ]
    biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
    trunk = Mlp(weights=weights[:-2], biases=biases[:-2])
    clamp = doc["log_std_clamp"]
    return GaussianPolicy(
        trunk=trunk,
        mean_w=weights[-2],
        mean_b=biases[-2],
        log_std_w=weights[-1],
        log_std_b=biases[-1],
        log_std_min=float(clamp[0]),
        log_std_max=float(clamp[1]),
        bound_scale=np.asarray(doc["bound_scale"], dtype=float),
        bound_offset=np.asarray(doc["bound_offset"], dtype=float),
        mean_shift=np.asarray(doc["mean_shift"], dtype=float),
    )


def save_policy(policy: GaussianPolicy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy_to_dict(policy), fh, indent=1)
        fh.write("\n")


def load_policy(path) -> GaussianPolicy:
    with open(path, "r", encoding="utf-8") as fh:
        return policy_from_dict(json.load(fh))
