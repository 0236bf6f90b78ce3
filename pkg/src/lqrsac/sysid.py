"""Online identification of the local linear model and its LQR gain.

Transitions are collected only inside the eta-ball around the origin, in
two phases: zero-action rows first (for the state matrix), then
policy-exploration rows (for the input matrix). Each phase keeps a
sliding window of the freshest samples. Estimation is plain least
squares; the gain comes from the Riccati solver and is tagged with a
Schur-stability check of the estimated closed loop.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import linalg


class Phase(enum.Enum):
    COLLECT_A = "collect_a"
    COLLECT_B = "collect_b"
    DONE = "done"


class ActionMode(enum.Enum):
    ZERO = "zero"
    EXPLORE = "explore"
    POLICY_ONLY = "policy_only"


class GainUnavailableError(Exception):
    """The Riccati solve on the identified model did not converge."""


@dataclass
class LinearModel:
    a_hat: np.ndarray
    b_hat: np.ndarray | None  # None until phase B completes
    fit_residuals: tuple[float, float]


@dataclass(frozen=True)
class GainEstimate:
    k_hat: np.ndarray
    p: np.ndarray
    schur_stable: bool
    timestamp: int
    dare_residual: float


class SysIdBuffer:
    """Phase-gated sample store; x rows are kept strictly inside the
    eta-ball and phase-A rows are accepted only for exactly-zero actions."""

    def __init__(self, eta: float, threshold_a: int, threshold_b: int):
        if eta <= 0:
            raise ValueError(f"eta must be > 0, got {eta}")
        self.eta = eta
        self.threshold_a = threshold_a
        self.threshold_b = threshold_b
        self.phase = Phase.COLLECT_A
        self.rows_x_a: deque = deque(maxlen=threshold_a)
        self.rows_y_a: deque = deque(maxlen=threshold_a)
        self.rows_x_b: deque = deque(maxlen=threshold_b)
        self.rows_u_b: deque = deque(maxlen=threshold_b)
        self.rows_y_b: deque = deque(maxlen=threshold_b)

    @property
    def samples_a(self) -> int:
        return len(self.rows_x_a)

    @property
    def samples_b(self) -> int:
        return len(self.rows_x_b)

    @property
    def ready_a(self) -> bool:
        return self.phase == Phase.COLLECT_A and self.samples_a >= self.threshold_a

    @property
    def ready_b(self) -> bool:
        return self.phase == Phase.COLLECT_B and self.samples_b >= self.threshold_b

    def request_mode(self, x: np.ndarray) -> ActionMode:
        """What the collector wants the agent to do at state x."""
        if float(np.linalg.norm(x)) >= self.eta or self.phase == Phase.DONE:
            return ActionMode.POLICY_ONLY
        if self.phase == Phase.COLLECT_A:
            return ActionMode.ZERO
        return ActionMode.EXPLORE

    def maybe_collect(self, x, u, x_next) -> tuple[bool, ActionMode]:
        """Store the executed transition when the phase admits it.

        Returns (stored, the action mode requested for states like x).
        """
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        x_next = np.asarray(x_next, dtype=float)
        mode = self.request_mode(x)
        if float(np.linalg.norm(x)) >= self.eta or self.phase == Phase.DONE:
            return False, mode
        if self.phase == Phase.COLLECT_A:
            if np.any(u != 0.0):
                return False, mode
            self.rows_x_a.append(x.copy())
            self.rows_y_a.append(x_next.copy())
            return True, mode
        if np.all(u == 0.0):
            return False, mode
        self.rows_x_b.append(x.copy())
        self.rows_u_b.append(u.copy())
        self.rows_y_b.append(x_next.copy())
        return True, mode

    def advance(self) -> None:
        """Monotone phase step, called after a successful estimation."""
        if self.phase == Phase.COLLECT_A:
            self.phase = Phase.COLLECT_B
        elif self.phase == Phase.COLLECT_B:
            self.phase = Phase.DONE


def estimate_a(buffer: SysIdBuffer, ridge: float = 1e-8):
    """Least-squares state matrix from the zero-action rows.

    Returns (A_hat, rms residual). Raises SingularSystemError on rank
    deficiency; the caller keeps collecting in that case.
    """
    if buffer.samples_a == 0:
        raise ValueError("no phase-A samples collected")
    x = np.stack(buffer.rows_x_a)
    y = np.stack(buffer.rows_y_a)
    a_hat = linalg.solve_least_squares(x, y, ridge)
    resid = float(np.linalg.norm(y - x @ a_hat.T, "fro") / np.sqrt(x.shape[0]))
    return a_hat, resid


def estimate_b(buffer: SysIdBuffer, a_hat: np.ndarray, ridge: float = 1e-8):
    """Least-squares input matrix from the exploration rows, fitting
    x_next - A_hat x ~= B u. Returns (B_hat, rms residual)."""
    if buffer.samples_b == 0:
        raise ValueError("no phase-B samples collected")
    x = np.stack(buffer.rows_x_b)
    u = np.stack(buffer.rows_u_b)
    y = np.stack(buffer.rows_y_b)
    resid_rows = y - x @ a_hat.T
    b_hat = linalg.solve_least_squares(u, resid_rows, ridge)
    resid = float(
        np.linalg.norm(resid_rows - u @ b_hat.T, "fro") / np.sqrt(u.shape[0])
    )
    return b_hat, resid


def compute_gain(
    model: LinearModel,
    q: np.ndarray,
    r: np.ndarray,
    timestamp: int = 0,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> GainEstimate:
    """Gain from the Riccati equation on the identified model.

    The feedback applied downstream is u = -K_hat x. Raises
    GainUnavailableError when the Riccati iteration does not converge
    (typically an unstabilizable estimate); the caller's K_available flag
    then stays false.
    """
    try:
        sol = linalg.solve_dare(model.a_hat, model.b_hat, q, r, tol=tol, max_iter=max_iter)
    except linalg.RiccatiConvergenceError as err:
        raise GainUnavailableError(
            f"Riccati solve failed on the identified model: {err}"
        ) from err
    a_cl = model.a_hat - model.b_hat @ sol.k
    return GainEstimate(
        k_hat=sol.k,
        p=sol.p,
        schur_stable=linalg.is_schur_stable(a_cl),
        timestamp=timestamp,
        dare_residual=sol.residual,
    )


SYSID_REPORT_COLUMNS = (
    "phase",
    "samples_A",
    "samples_B",
    "fro_err_A_vs_linearization",
    "fro_err_B_vs_linearization",
    "schur_stable",
    "dare_residual",
)


def sysid_report_row(
    buffer: SysIdBuffer,
    model: LinearModel | None,
    gain: GainEstimate | None,
    a_true: np.ndarray,
    b_true: np.ndarray,
) -> dict:
    """One report row comparing the current estimates against the
    finite-difference linearization ground truth."""
    row = {
        "phase": buffer.phase.value,
        "samples_A": buffer.samples_a,
        "samples_B": buffer.samples_b,
        "fro_err_A_vs_linearization": "",
        "fro_err_B_vs_linearization": "",
        "schur_stable": "",
        "dare_residual": "",
    }
    if model is not None:
        row["fro_err_A_vs_linearization"] = float(
            np.linalg.norm(model.a_hat - a_true, "fro")
        )
        if model.b_hat is not None:
            row["fro_err_B_vs_linearization"] = float(
                np.linalg.norm(model.b_hat - b_true, "fro")
            )
    if gain is not None:
        row["schur_stable"] = int(gain.schur_stable)
        row["dare_residual"] = gain.dare_residual
    return row
