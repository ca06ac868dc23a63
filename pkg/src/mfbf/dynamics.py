"""Discrete-time plant models.

Two plants are provided behind the same batched ``step(X, U)`` interface:

* the two-vehicle fixed-wing system (unicycle with altitude per vehicle),
  state ``(x1, y1, th1, z1, x2, y2, th2, z2)`` and control
  ``(v1, w1, zeta1, v2, w2, zeta2)``;
* the scalar double integrator, state ``(position, velocity)`` and a
  scalar acceleration input.

Arrays are the working representation everywhere; the dataclasses exist for
readable construction and serialize to/from the flat ordering above.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

STATE_DIM = 8
CONTROL_DIM = 6
HEADING_INDICES = (2, 6)

# slack for comparing controls against bounds given in degrees
_BOUND_TOL = 1e-12


class BoundsError(ValueError):
    """A control value lies outside the plant's admissible bounds."""


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    out = np.pi - np.mod(np.pi - theta, 2.0 * np.pi)
    # np.mod can round up to exactly 2*pi for tiny negative arguments
    out = np.where(out <= -np.pi, out + 2.0 * np.pi, out)
    # in-range angles pass through bit-exact
    return np.where((theta > -np.pi) & (theta <= np.pi), theta, out)


@dataclass(frozen=True)
class VehicleState:
    px: float
    py: float
    theta: float
    pz: float = 0.0

    def __post_init__(self):
        vals = (self.px, self.py, self.theta, self.pz)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite vehicle state {vals}")
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    def to_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.theta, self.pz], dtype=float)


@dataclass(frozen=True)
class JointState:
    vehicle1: VehicleState
    vehicle2: VehicleState

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.vehicle1.to_array(), self.vehicle2.to_array()])

    @classmethod
    def from_array(cls, x) -> "JointState":
        x = np.asarray(x, dtype=float).reshape(STATE_DIM)
        return cls(VehicleState(*x[:4]), VehicleState(*x[4:]))


@dataclass(frozen=True)
class VehicleControl:
    v: float
    omega: float = 0.0
    zeta: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.v, self.omega, self.zeta], dtype=float)


@dataclass(frozen=True)
class ControlInput:
    vehicle1: VehicleControl
    vehicle2: VehicleControl

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.vehicle1.to_array(), self.vehicle2.to_array()])

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        u = np.asarray(u, dtype=float).reshape(CONTROL_DIM)
        return cls(VehicleControl(*u[:3]), VehicleControl(*u[3:]))


@dataclass(frozen=True)
class DoubleIntegratorState:
    position: float
    velocity: float

    def __post_init__(self):
        if not np.all(np.isfinite((self.position, self.velocity))):
            raise ValueError("non-finite double integrator state")

    def to_array(self) -> np.ndarray:
        return np.array([self.position, self.velocity], dtype=float)

    @classmethod
    def from_array(cls, x) -> "DoubleIntegratorState":
        x = np.asarray(x, dtype=float).reshape(2)
        return cls(float(x[0]), float(x[1]))


@dataclass(frozen=True)
class PlantParams:
    """Time step and control bounds of the fixed-wing plant.

    Both the turn-rate and climb-rate bounds are treated as inclusive.
    """

    dt: float = 0.1
    v_min: float = 10.0
    v_max: float = 20.0
    omega_max: float = float(np.radians(12.0))
    zeta_max: float = 5.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not 0 < self.v_min <= self.v_max:
            raise ValueError(f"need 0 < v_min <= v_max, got {self.v_min}, {self.v_max}")
        if self.omega_max < 0 or self.zeta_max < 0:
            raise ValueError("omega_max and zeta_max must be nonnegative")

    def check_controls(self, u) -> None:
        """Raise BoundsError if any control row violates the bounds."""
        u = np.asarray(u, dtype=float).reshape(-1, CONTROL_DIM)
        v, w, z = u[:, [0, 3]], u[:, [1, 4]], u[:, [2, 5]]
        tol = _BOUND_TOL
        if not np.all(np.isfinite(u)):
            raise BoundsError("non-finite control")
        if np.any(v < self.v_min - tol) or np.any(v > self.v_max + tol):
            raise BoundsError(f"speed outside [{self.v_min}, {self.v_max}]: {v.ravel()}")
        if np.any(np.abs(w) > self.omega_max + tol):
            raise BoundsError(f"turn rate exceeds {self.omega_max} rad/s: {w.ravel()}")
        if np.any(np.abs(z) > self.zeta_max + tol):
            raise BoundsError(f"climb rate exceeds {self.zeta_max} m/s: {z.ravel()}")


def _as_array(obj, dim):
    if hasattr(obj, "to_array"):
        return obj.to_array()
    arr = np.asarray(obj, dtype=float)
    if arr.shape[-1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got shape {arr.shape}")
    return arr


def fw_uav_kernel(X: np.ndarray, U: np.ndarray, dt: float) -> np.ndarray:
    """Unchecked batched fixed-wing update; X is (..., 8), U is (..., 6)."""
    out = np.empty(np.broadcast_shapes(X.shape[:-1], U.shape[:-1]) + (STATE_DIM,))
    for s, c in ((0, 0), (4, 3)):
        th = X[..., s + 2]
        v = U[..., c]
        out[..., s] = X[..., s] + v * np.cos(th) * dt
        out[..., s + 1] = X[..., s + 1] + v * np.sin(th) * dt
        out[..., s + 2] = wrap_angle(th + U[..., c + 1] * dt)
        out[..., s + 3] = X[..., s + 3] + U[..., c + 2] * dt
    return out


def step_fw_uav(x, u, p: PlantParams = PlantParams()):
    """Advance the two-vehicle system one step.

    Position updates use the pre-step heading. Accepts arrays (flat or
    batched) or the dataclasses; returns the same kind as ``x``.

    Raises:
        BoundsError: if ``u`` violates the bounds in ``p``. Controls are
            never clamped.
    """
    X = _as_array(x, STATE_DIM)
    U = _as_array(u, CONTROL_DIM)
    p.check_controls(U)
    out = fw_uav_kernel(X, U, p.dt)
    return JointState.from_array(out) if isinstance(x, JointState) else out


def step_double_integrator(x, u, dt: float = 0.1):
    """One step of ``x+ = [[1, dt], [0, 1]] x + [0, dt] u``."""
    X = _as_array(x, 2)
    U = np.asarray(u, dtype=float)
    if U.ndim and U.shape[-1] == 1 and U.ndim == X.ndim:
        U = U[..., 0]
    out = np.empty_like(X)
    out[..., 0] = X[..., 0] + dt * X[..., 1]
    out[..., 1] = X[..., 1] + dt * U
    if isinstance(x, DoubleIntegratorState):
        return DoubleIntegratorState.from_array(out)
    return out


class FixedWingPlant:
    """Batched black-box stepping for the two-vehicle fixed-wing system."""

    state_dim = STATE_DIM
    control_dim = CONTROL_DIM
    heading_indices = HEADING_INDICES

    def __init__(self, params: PlantParams = PlantParams()):
        self.params = params

    @property
    def dt(self) -> float:
        return self.params.dt

    def step(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return fw_uav_kernel(np.asarray(X, dtype=float), np.asarray(U, dtype=float), self.params.dt)

    def check_controls(self, U) -> None:
        self.params.check_controls(U)

    def constant_control_states(self, X0, u, ks) -> np.ndarray:
        """States after ``k`` steps of the constant control ``u`` for each k in ``ks``.

        Closed form of iterating :meth:`step`: the heading advances by
        ``omega * dt`` per step and the position by a geometric sum of unit
        vectors. Output shape is ``X0.shape[:-1] + (len(ks), 8)``.
        """
        X0 = np.asarray(X0, dtype=float)
        u = np.asarray(u, dtype=float)
        k = np.asarray(ks, dtype=float)
        dt = self.params.dt
        # component-major buffer: each state component is one contiguous plane
        out = np.empty((STATE_DIM,) + X0.shape[:-1] + (len(k),))
        for s, c in ((0, 0), (4, 3)):
            v, w, zeta = u[c], u[c + 1], u[c + 2]
            th0 = X0[..., s + 2, None]
            phi = w * dt
            # sum_{j<k} (cos, sin)(th0 + j phi) = ratio * (cos, sin)(th0 + (k-1) phi / 2)
            # with the Dirichlet ratio sin(k phi / 2) / sin(phi / 2), which stays
            # accurate as phi -> 0; angle addition keeps trig on (B,) and (K,) only
            ratio = k if phi == 0.0 else np.sin(k * phi / 2) / np.sin(phi / 2)
            a = (k - 1) * phi / 2
            sa, ca = np.sin(a), np.cos(a)
            s0, c0 = np.sin(th0), np.cos(th0)
            cx = ratio * (c0 * ca - s0 * sa)
            cy = ratio * (s0 * ca + c0 * sa)
            out[s] = X0[..., s, None] + (v * dt) * cx
            out[s + 1] = X0[..., s + 1, None] + (v * dt) * cy
            out[s + 2] = wrap_angle(th0 + k * phi)
            out[s + 3] = X0[..., s + 3, None] + k * (zeta * dt)
        return np.moveaxis(out, 0, -1)

    def __repr__(self):
        return f"FixedWingPlant({self.params})"


class DoubleIntegratorPlant:
    state_dim = 2
    control_dim = 1
    heading_indices = ()

    def __init__(self, dt: float = 0.1):
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.dt = dt

    def step(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return step_double_integrator(np.asarray(X, dtype=float), np.asarray(U, dtype=float), self.dt)

    def check_controls(self, U) -> None:
        if not np.all(np.isfinite(U)):
            raise BoundsError("non-finite control")

    def __repr__(self):
        return f"DoubleIntegratorPlant(dt={self.dt})"


@dataclass(frozen=True, eq=False)
class ActionSet:
    """Finite, ordered set of joint controls, one row per action.

    The row order is the enumeration order used for tie-breaking.
    """

    actions: np.ndarray

    def __post_init__(self):
        a = np.array(self.actions, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if a.ndim != 2 or len(a) == 0:
            raise ValueError("action set must be a non-empty 2-D array")
        a.setflags(write=False)
        object.__setattr__(self, "actions", a)

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i) -> np.ndarray:
        return self.actions[i]

    @property
    def control_dim(self) -> int:
        return self.actions.shape[1]

    def index_of(self, U, atol: float = 1e-12) -> np.ndarray:
        """Index of each row of U in the set, or -1 when absent."""
        U = np.asarray(U, dtype=float).reshape(-1, self.control_dim)
        hit = np.all(np.abs(U[:, None, :] - self.actions[None]) <= atol, axis=-1)
        return np.where(hit.any(axis=1), hit.argmax(axis=1), -1)

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "ActionSet":
        """Scalar-input action set, e.g. for the double integrator."""
        return cls(np.asarray(values, dtype=float)[:, None])


def make_action_set(
    omega_choices: Sequence[float],
    v_fixed: float = 15.0,
    zeta_fixed: float = 0.0,
    params: PlantParams = PlantParams(),
) -> ActionSet:
    """Joint action set: Cartesian product of per-vehicle turn-rate choices.

    Vehicle 1's choice varies slowest, so for choices ``(-w, 0, w)`` index 0
    is ``(-w, -w)`` and index 8 is ``(w, w)``.
    """
    omega_choices = list(omega_choices)
    if not omega_choices:
        raise ValueError("omega_choices is empty")
    rows = [
        (v_fixed, w1, zeta_fixed, v_fixed, w2, zeta_fixed)
        for w1, w2 in itertools.product(omega_choices, repeat=2)
    ]
    params.check_controls(rows)
    return ActionSet(np.array(rows))


def experiment_action_set(params: PlantParams = PlantParams()) -> ActionSet:
    """The nine joint actions used in the fixed-wing experiments."""
    w = np.radians(12.0)
    return make_action_set([-w, 0.0, w], 15.0, 0.0, params)
