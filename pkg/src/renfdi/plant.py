"""Four-DOF nonlinear roll-plane vehicle model.

Generalized coordinates ``q = (q1, q2, q3, q4)``: left and right body
attachment points of the roll bar, then left and right tire. Inputs are the
two road positions. The state vector is ``(q, q_dot)`` of length 8.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as sla

SAMPLE_RATE = 100.0
CSV_HEADER = "t,q1,q2,q3,q4,qd1,qd2,qd3,qd4,u1,u2"


@dataclass(frozen=True)
class RollPlaneParams:
    m: float = 580.0
    m_t1: float = 36.26
    m_t2: float = 36.26
    inertia: float = 63.3316
    track: float = 1.524
    c1: float = 710.70
    c2: float = 710.70
    c1_n: float = 0.71
    c2_n: float = 0.71
    k1: float = 19357.2
    k2: float = 19357.2
    kt1: float = 96319.76
    kt2: float = 96319.76
    k1_n: float = 15000.0
    k2_n: float = 15000.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not value > 0:
                raise ValueError(f"{f.name} must be strictly positive, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)

    @cached_property
    def mass_matrix(self) -> np.ndarray:
        m, ratio = self.m, self.inertia / self.track
        return np.array([
            [m / 2, m / 2, 0.0, 0.0],
            [-ratio, ratio, 0.0, 0.0],
            [0.0, 0.0, self.m_t1, 0.0],
            [0.0, 0.0, 0.0, self.m_t2],
        ])

    @cached_property
    def mass_lu(self):
        M = self.mass_matrix
        if abs(np.linalg.det(M)) < 1e-12 * np.abs(M).max() ** 4:
            raise np.linalg.LinAlgError("roll-plane mass matrix is singular")
        return sla.lu_factor(M)


def spring_force(x, k, k_n):
    return k * x + k_n * x**3


def damper_force(xd, c, c_n):
    return c * xd + c_n * (0.2 * np.tanh(10.0 * xd))


def dynamics(state, u, params: RollPlaneParams = RollPlaneParams()):
    """Time derivative of ``state`` (shape ``(..., 8)``) for road input ``u``
    (shape ``(..., 2)``)."""
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    q, qd = state[..., :4], state[..., 4:]
    p = params

    fk1 = spring_force(q[..., 0] - q[..., 2], p.k1, p.k1_n)
    fk2 = spring_force(q[..., 1] - q[..., 3], p.k2, p.k2_n)
    fc1 = damper_force(qd[..., 0] - qd[..., 2], p.c1, p.c1_n)
    fc2 = damper_force(qd[..., 1] - qd[..., 3], p.c2, p.c2_n)
    half = p.track / 2

    # f_U - f_K - f_C; the spring and damper laws are odd, so
    # F(q3 - q1) = -F(q1 - q3).
    rhs = np.stack([
        -(fk1 + fk2) - (fc1 + fc2),
        -half * (fk2 - fk1) - half * (fc2 - fc1),
        p.kt1 * u[..., 0] + fk1 - p.kt1 * q[..., 2] + fc1,
        p.kt2 * u[..., 1] + fk2 - p.kt2 * q[..., 3] + fc2,
    ], axis=-1)
    lead = rhs.shape[:-1]
    qdd = sla.lu_solve(p.mass_lu, rhs.reshape(-1, 4).T).T.reshape(*lead, 4)
    return np.concatenate([qd, qdd], axis=-1)


def rk4_step(state, u_held, dt, params: RollPlaneParams = RollPlaneParams()):
    """Classical RK4 step with the input held constant over ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = dynamics(state, u_held, params)
    k2 = dynamics(state + 0.5 * dt * k1, u_held, params)
    k3 = dynamics(state + 0.5 * dt * k2, u_held, params)
    k4 = dynamics(state + dt * k3, u_held, params)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate(inputs, params: RollPlaneParams = RollPlaneParams(),
             duration: float = 20.0, sample_rate: float = SAMPLE_RATE):
    """Integrate from rest under zero-order-held ``inputs``.

    ``inputs`` has shape ``(n, 2)`` or ``(batch, n, 2)`` with
    ``n = duration * sample_rate + 1``. Returns states of shape ``(..., n, 8)``;
    sample 0 is the zero initial state.
    """
    inputs = np.asarray(inputs, dtype=float)
    n = int(round(duration * sample_rate)) + 1
    if inputs.shape[-2] != n or inputs.shape[-1] != 2:
        raise ValueError(
            f"expected {n} input samples of width 2, got shape {inputs.shape}")
    dt = 1.0 / sample_rate
    traj = np.zeros(inputs.shape[:-1] + (8,))
    x = traj[..., 0, :]
    for k in range(n - 1):
        x = rk4_step(x, inputs[..., k, :], dt, params)
        traj[..., k + 1, :] = x
    return traj


def measure(state):
    """Relative displacements then relative velocities between the roll bar
    and the tires: ``(q1-q3, q2-q4, qd1-qd3, qd2-qd4)``."""
    s = np.asarray(state, dtype=float)
    return np.stack([s[..., 0] - s[..., 2], s[..., 1] - s[..., 3],
                     s[..., 4] - s[..., 6], s[..., 5] - s[..., 7]], axis=-1)


def export_trajectory_csv(path, traj, inputs, sample_rate: float = SAMPLE_RATE):
    traj = np.asarray(traj, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    t = np.arange(traj.shape[0]) / sample_rate
    table = np.column_stack([t, traj, inputs])
    np.savetxt(Path(path), table, delimiter=",", header=CSV_HEADER,
               comments="", fmt="%.17g")
    return Path(path)
