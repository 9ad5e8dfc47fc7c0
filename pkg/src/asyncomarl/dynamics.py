"""Planar point-mass dynamics for the two benchmark worlds.

Satellites follow the in-plane Clohessy-Wiltshire equations

    x'' - 3 n^2 x - 2 n y' = u_x
    y'' + 2 n x'           = u_y

with x radial and y along-track, discretized exactly under a zero-order hold.
Rovers use the damped particle integrator of the particle-world framework.
State vectors are ordered (x, y, vx, vy) in metres and metres/second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

N_ACTIONS = 5


class InvalidActionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class PlanarState:
    p: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(2)
        self.v = np.asarray(self.v, dtype=float).reshape(2)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v])

    @classmethod
    def from_vector(cls, s) -> "PlanarState":
        s = np.asarray(s, dtype=float)
        return cls(s[:2].copy(), s[2:4].copy())


@dataclass(frozen=True)
class OrbitalParams:
    omega_n: float
    dt: float
    A_d: np.ndarray
    B_d: np.ndarray
    u_mag: float = 0.1

    @classmethod
    def build(cls, omega_n: float, dt: float, u_mag: float = 0.1) -> "OrbitalParams":
        A_d, B_d = cw_zoh(omega_n, dt)
        return cls(omega_n=omega_n, dt=dt, A_d=A_d, B_d=B_d, u_mag=u_mag)


def cw_continuous(omega_n: float) -> tuple[np.ndarray, np.ndarray]:
    n = float(omega_n)
    A = np.array(
        [
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [3.0 * n * n, 0.0, 0.0, 2.0 * n],
            [0.0, 0.0, -2.0 * n, 0.0],
        ]
    )
    B = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return A, B


def cw_zoh(omega_n: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold discretization of the planar CW system.

    Uses the matrix exponential of the augmented system ``[[A, B], [0, 0]] * dt``,
    whose top blocks are ``A_d = e^{A dt}`` and ``B_d = int_0^dt e^{A s} ds B``.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if omega_n < 0:
        raise ValueError(f"omega_n must be non-negative, got {omega_n}")
    A, B = cw_continuous(omega_n)
    M = np.zeros((6, 6))
    M[:4, :4] = A
    M[:4, 4:] = B
    E = expm(M * dt)
    return E[:4, :4].copy(), E[:4, 4:].copy()


def cw_step(s: PlanarState, u, params: OrbitalParams) -> PlanarState:
    x = s.as_vector()
    u = np.asarray(u, dtype=float).reshape(2)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise NumericError("non-finite state or control passed to cw_step")
    return PlanarState.from_vector(params.A_d @ x + params.B_d @ u)


def cw_step_batch(states: np.ndarray, controls: np.ndarray, params: OrbitalParams) -> np.ndarray:
    """Row-wise :func:`cw_step` on an ``(k, 4)`` state array."""
    return states @ params.A_d.T + controls @ params.B_d.T


def mpe_step(s: PlanarState, u, dt: float, damping: float) -> PlanarState:
    if not 0.0 <= damping < 1.0:
        raise ValueError(f"damping must lie in [0, 1), got {damping}")
    u = np.asarray(u, dtype=float).reshape(2)
    v = s.v * (1.0 - damping) + u * dt
    return PlanarState(s.p + v * dt, v)


def mpe_step_batch(states: np.ndarray, controls: np.ndarray, dt: float, damping: float) -> np.ndarray:
    v = states[:, 2:] * (1.0 - damping) + controls * dt
    return np.concatenate([states[:, :2] + v * dt, v], axis=1)


_DIRECTIONS = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


def action_decode(a: int, u_mag: float) -> np.ndarray:
    """Map a discrete action to an acceleration: no-op, +x, -x, +y, -y."""
    if not 0 <= int(a) < N_ACTIONS or int(a) != a:
        raise InvalidActionError(f"action must be an integer in 0..{N_ACTIONS - 1}, got {a}")
    return _DIRECTIONS[int(a)] * u_mag

