"""Run configuration: defaults, TOML files, dotted overrides, freezing.

Precedence: CLI flags and --set overrides > config file > documented
defaults. Resolution is total — the frozen copy written into every run
directory carries a concrete value for every key, so a run can be
reproduced from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import envs
from .agent import TrainConfig


class ConfigError(Exception):
    """Invalid configuration; `keys` lists the offending dotted keys."""

    def __init__(self, keys: list[str], message: str | None = None):
        self.keys = list(keys)
        super().__init__(message or f"invalid configuration keys: {', '.join(self.keys)}")


# hidden-network sizes per environment (layers, width)
DEFAULT_NETWORKS = {
    "pendulum": (2, 16),
    "cartpole": (2, 256),
    "quad2d": (4, 256),
    "linear": (2, 16),
}

ENV_DEFAULT_BLOCKS: dict[str, dict] = {
    "pendulum": {
        "dt": 0.02,
        "mass": 0.15,
        "length": 0.5,
        "gravity": 9.81,
        "torque_max": 6.0,
        "domain_low": [-2.0 * math.pi, -8.0],
        "domain_high": [2.0 * math.pi, 8.0],
        "init_low": [-1.0, -1.0],
        "init_high": [1.0, 1.0],
        "r_const": 1.0,
        "terminal_penalty": 10.0,
        "reward_scale": 2.0,
        "q_diag": None,
    },
    "cartpole": {
        "dt": 0.02,
        "cart_mass": 1.0,
        "pole_mass": 0.1,
        "half_length": 0.5,
        "gravity": 9.81,
        "force_max": 10.0,
        "domain_low": [-2.4, -5.0, -math.pi / 3.0, -5.0],
        "domain_high": [2.4, 5.0, math.pi / 3.0, 5.0],
        "init_low": [-0.5, -0.5, -0.2, -0.5],
        "init_high": [0.5, 0.5, 0.2, 0.5],
        "r_const": 1.0,
        "terminal_penalty": 10.0,
        "reward_scale": 2.0,
        "q_diag": None,
    },
    "quad2d": {
        "dt": 0.02,
        "mass": 0.5,
        "inertia": 0.01,
        "arm": 0.1,
        "gravity": 9.81,
        "thrust_max": 3.0,
        "domain_low": [-2.0, -2.0, -math.pi / 3.0, -4.0, -4.0, -4.0],
        "domain_high": [2.0, 2.0, math.pi / 3.0, 4.0, 4.0, 4.0],
        "init_low": [-0.5, -0.5, -0.2, -0.5, -0.5, -0.5],
        "init_high": [0.5, 0.5, 0.2, 0.5, 0.5, 0.5],
        "r_const": 1.0,
        "terminal_penalty": 10.0,
        "reward_scale": 2.0,
        "q_diag": None,
    },
    "linear": {
        "a": [[0.9]],
        "b": [[0.1]],
        "domain_low": [-2.0],
        "domain_high": [2.0],
        "action_low": [-5.0],
        "action_high": [5.0],
        "init_low": [-1.0],
        "init_high": [1.0],
        "r_const": 1.0,
        "terminal_penalty": 10.0,
        "reward_scale": 2.0,
        "q_diag": None,
    },
}


@dataclass
class EvalConfig:
    n_starts: int = 50
    horizon: int = 500
    r_cost_scale: float = 0.1
    final_window: int = 100


@dataclass
class VerifyConfig:
    grid_density: int = 10_000
    bisection_steps: int = 20
    margin_scale: float = 1e-6  # decrease margin = margin_scale * lambda_min(Q_v)
    q_v_diag: list | None = None  # identity when unset


@dataclass
class IoConfig:
    out: str = "runs/run"
    checkpoint_every: int = 0  # 0 = final artifacts only


@dataclass
class ResolvedConfig:
    seed: int
    env_block: dict
    train: TrainConfig
    eval: EvalConfig
    verify: VerifyConfig
    io: IoConfig

    def build_env(self) -> envs.EnvSpec:
        block = {k: v for k, v in self.env_block.items() if k != "name"}
        return envs.make_env(self.env_block["name"], **block)


def load_config_file(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def parse_set_overrides(pairs: list[str]) -> dict:
    """--set a.b=value strings into a nested dict; values are parsed as
    TOML literals, falling back to bare strings."""
    out: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError([pair], f"--set expects key=value, got {pair!r}")
        dotted, raw = pair.split("=", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([dotted], f"cannot override non-table key {dotted!r}")
        node[parts[-1]] = value
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _coerce_dataclass(cls, values: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    bad = [f"{section}.{k}" for k in values if k not in known]
    if bad:
        raise ConfigError(bad)
    kwargs = {}
    for k, v in values.items():
        default = known[k].default
        if isinstance(default, bool):
            kwargs[k] = bool(v)
        elif isinstance(default, int) and not isinstance(v, bool):
            kwargs[k] = int(v)
        elif isinstance(default, float):
            kwargs[k] = float(v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def resolve(
    file_doc: dict | None = None,
    set_overrides: dict | None = None,
    env_name: str | None = None,
    seed: int | None = None,
    out: str | None = None,
) -> ResolvedConfig:
    doc = _merge(file_doc or {}, set_overrides or {})
    known_sections = {"env", "train", "eval", "verify", "io", "seed"}
    bad = sorted(set(doc) - known_sections)
    if bad:
        raise ConfigError(bad)

    run_seed = seed if seed is not None else doc.get("seed", 0)
    if not isinstance(run_seed, int):
        raise ConfigError(["seed"], f"seed must be an integer, got {run_seed!r}")

    env_user = dict(doc.get("env", {}))
    if env_name is not None:
        env_user["name"] = env_name
    name = env_user.pop("name", None)
    if name is None:
        raise ConfigError(["env.name"], "env.name is required (no default environment)")
    if name not in ENV_DEFAULT_BLOCKS:
        raise ConfigError(
            ["env.name"],
            f"unknown environment {name!r}; known: {sorted(ENV_DEFAULT_BLOCKS)}",
        )
    defaults = ENV_DEFAULT_BLOCKS[name]
    bad = [f"env.{k}" for k in env_user if k not in defaults]
    if bad:
        raise ConfigError(bad)
    env_block = _merge(defaults, env_user)
    env_block["name"] = name

    train_user = dict(doc.get("train", {}))
    layers, width = DEFAULT_NETWORKS[name]
    train_user.setdefault("hidden_layers", layers)
    train_user.setdefault("hidden_size", width)
    # single source for the reward scale: an explicit env value wins,
    # otherwise the train block's value parameterizes the reward
    if "reward_scale" in env_user:
        train_user["reward_scale"] = env_block["reward_scale"]
    elif "reward_scale" in train_user:
        env_block["reward_scale"] = float(train_user["reward_scale"])
    else:
        env_block["reward_scale"] = TrainConfig.reward_scale
    train_user["seed"] = run_seed
    train = _coerce_dataclass(TrainConfig, train_user, "train")
    try:
        train.validate()
    except ValueError as err:
        raise ConfigError(["train"], f"train config invalid: {err}") from err

    eval_cfg = _coerce_dataclass(EvalConfig, doc.get("eval", {}), "eval")
    verify_cfg = _coerce_dataclass(VerifyConfig, doc.get("verify", {}), "verify")
    io_user = dict(doc.get("io", {}))
    if out is not None:
        io_user["out"] = out
    io_cfg = _coerce_dataclass(IoConfig, io_user, "io")

    rc = ResolvedConfig(
        seed=run_seed,
        env_block=env_block,
        train=train,
        eval=eval_cfg,
        verify=verify_cfg,
        io=io_cfg,
    )
    # building validates the numbers and fills the computed reward diagonal
    spec = rc.build_env()
    rc.env_block["q_diag"] = np.diag(spec.q_reward).tolist()
    return rc


# ---------------------------------------------------------------------------
# freezing


def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    raise TypeError(f"cannot render {type(v).__name__} as TOML")


def resolved_to_doc(rc: ResolvedConfig) -> dict:
    return {
        "seed": rc.seed,
        "env": dict(rc.env_block),
        "train": dataclasses.asdict(rc.train),
        "eval": dataclasses.asdict(rc.eval),
        "verify": {
            k: (v if v is not None else [])
            for k, v in dataclasses.asdict(rc.verify).items()
        },
        "io": dataclasses.asdict(rc.io),
    }


def write_resolved(path, rc: ResolvedConfig) -> None:
    doc = resolved_to_doc(rc)
    lines = [f"seed = {_toml_scalar(doc['seed'])}", ""]
    for section in ("env", "train", "eval", "verify", "io"):
        lines.append(f"[{section}]")
        for k in sorted(doc[section]):
            v = doc[section][k]
            if v is None:
                continue
            lines.append(f"{k} = {_toml_scalar(v)}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
