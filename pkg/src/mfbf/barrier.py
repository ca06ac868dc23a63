"""Rollout barrier functions, admissibility and the discrete safety filter.

A barrier is anything exposing ``value(X)`` and ``next_values(X, actions)``.
``next_values`` gives the barrier's estimate of ``h`` one step ahead for every
candidate action; the one-step change is ``delta = next - value``. Keeping
``next`` as the primitive lets the filter test ``next - (1 - lam) * value >= 0``
which, for ``lam = 1``, is exactly ``h(f(x, u)) >= 0`` with no cancellation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .dynamics import ActionSet, FixedWingPlant, PlantParams

Maneuver = Callable[[np.ndarray], np.ndarray]

DEFAULT_HORIZON = 500

# later rollout minima must undercut the current one by this much to move the
# argmin, so near-ties on periodic orbits resolve to the earliest index
_ARGMIN_TOL = 1e-9


class InfeasibleError(RuntimeError):
    """No action in the set satisfies the barrier inequality."""


@dataclass(frozen=True)
class SafetyFunction:
    """Clipped separation margin ``min(clip, d12 - ds)``.

    ``d12`` is the full 3-D distance between the two vehicles. ``clip=None``
    disables the upper clip.
    """

    ds: float = 25.0
    clip: float | None = 50.0

    def __post_init__(self):
        if not self.ds > 0:
            raise ValueError(f"safety distance must be positive, got {self.ds}")
        if self.clip is not None and not self.clip > 0:
            raise ValueError(f"clip must be positive, got {self.clip}")

    def __call__(self, X) -> np.ndarray:
        margin = distance(X) - self.ds
        if self.clip is None:
            return margin
        return np.minimum(self.clip, margin)


def distance(X) -> np.ndarray:
    """Euclidean distance between the two vehicles of a joint state."""
    X = np.asarray(X, dtype=float)
    dx = X[..., 0] - X[..., 4]
    dy = X[..., 1] - X[..., 5]
    dz = X[..., 3] - X[..., 7]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def position_safety(X) -> np.ndarray:
    """Safety function of the double integrator: the position itself."""
    return np.asarray(X, dtype=float)[..., 0]


class ConstantManeuver:
    """A maneuver that returns the same control in every state."""

    def __init__(self, control):
        self.control = np.atleast_1d(np.asarray(control, dtype=float))
        self.control.setflags(write=False)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X)
        return np.broadcast_to(self.control, X.shape[:-1] + self.control.shape)

    def __repr__(self):
        return f"ConstantManeuver({self.control.tolist()})"


def gamma_straight(v1: float = 15.0, v2: float = 15.0, zeta1: float = 0.0, zeta2: float = 0.0,
                   params: PlantParams = PlantParams()) -> ConstantManeuver:
    """Both vehicles hold their heading: ``(v1, 0, zeta1, v2, 0, zeta2)``."""
    u = np.array([v1, 0.0, zeta1, v2, 0.0, zeta2])
    params.check_controls(u)
    return ConstantManeuver(u)


def gamma_turn(eta: float = 1.0, v: float = 15.0, omega: float = float(np.radians(12.0)),
               params: PlantParams = PlantParams()) -> ConstantManeuver:
    """Both vehicles turn at the same rate, vehicle 1 at speed ``eta * v``."""
    if not 0 < eta <= 1:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    u = np.array([eta * v, omega, 0.0, v, omega, 0.0])
    params.check_controls(u)
    return ConstantManeuver(u)


def rollout_min(X0, gamma: Maneuver, step, rho, T: int, return_argmin: bool = False):
    """Minimum of ``rho`` along ``x_{k+1} = step(x_k, gamma(x_k))`` for k = 0..T.

    Batched over the leading axes of ``X0``. With ``return_argmin`` the first
    index attaining the minimum is returned too.
    """
    if T < 1:
        raise ValueError(f"horizon must be >= 1, got {T}")
    X = np.asarray(X0, dtype=float)
    best = np.asarray(rho(X), dtype=float).copy()
    arg = np.zeros(best.shape, dtype=int)
    for k in range(1, T + 1):
        X = step(X, gamma(X))
        r = rho(X)
        if return_argmin:
            arg[r < best - _ARGMIN_TOL] = k
            best = np.minimum(best, r)
        else:
            best = np.minimum(best, r)
    return (best, arg) if return_argmin else best


_TIME_BLOCK = 128


def constant_rollout_min(X0, plant, u, rho, T: int, return_argmin: bool = False):
    """:func:`rollout_min` for a constant control using the plant's closed form.

    Evaluates the trajectory in blocks of time steps instead of stepping, which
    is far cheaper for the small batches a filter produces.
    """
    if T < 1:
        raise ValueError(f"horizon must be >= 1, got {T}")
    X0 = np.asarray(X0, dtype=float)
    best = arg = None
    for k0 in range(0, T + 1, _TIME_BLOCK):
        ks = np.arange(k0, min(k0 + _TIME_BLOCK, T + 1))
        r = rho(plant.constant_control_states(X0, u, ks))
        i = np.argmin(r, axis=-1)
        m = np.take_along_axis(r, i[..., None], axis=-1)[..., 0]
        if best is None:
            best, arg = m, i + k0
        else:
            arg = np.where(m < best - _ARGMIN_TOL, i + k0, arg)
            best = np.minimum(best, m)
    return (best, arg) if return_argmin else best


def _closed_form(gamma, plant) -> bool:
    return isinstance(gamma, ConstantManeuver) and hasattr(plant, "constant_control_states")


def rollout_barrier(x0, gamma: Maneuver, plant, rho, T: int = DEFAULT_HORIZON):
    """Worst-case safety value of the evasive-maneuver rollout from ``x0``.

    Returns a float for a single state, an array for a batch.
    """
    if _closed_form(gamma, plant):
        out = constant_rollout_min(x0, plant, gamma.control, rho, T)
    else:
        out = rollout_min(x0, gamma, plant.step, rho, T)
    return float(out) if np.ndim(out) == 0 else out


class BarrierFunction:
    """Common interface: ``value``, ``next_values``; the rest derives."""

    state_dim: int

    def value(self, X) -> np.ndarray:
        raise NotImplementedError

    def next_values(self, X, actions) -> np.ndarray:
        """Estimate of h one step ahead, shape ``X.shape[:-1] + (n_actions,)``."""
        raise NotImplementedError

    def next_value(self, X, U) -> np.ndarray:
        """Estimate of h one step ahead for paired rows of X and U."""
        X = np.asarray(X, dtype=float)
        U = np.asarray(U, dtype=float)
        Xb = np.broadcast_to(X, np.broadcast_shapes(X.shape[:-1], U.shape[:-1]) + X.shape[-1:])
        flat_x = Xb.reshape(-1, X.shape[-1])
        flat_u = np.broadcast_to(U, Xb.shape[:-1] + U.shape[-1:]).reshape(len(flat_x), -1)
        out = np.array([self.next_values(x[None], u[None])[0, 0] for x, u in zip(flat_x, flat_u)])
        return out.reshape(Xb.shape[:-1])

    def delta(self, X, U) -> np.ndarray:
        return self.next_value(X, U) - self.value(X)

    def __call__(self, X) -> np.ndarray:
        return self.value(X)


class ExactBarrier(BarrierFunction):
    """Barrier backed by an explicit value function and plant access.

    ``next_values`` evaluates the value function at ``plant.step(x, u)``, so
    ``delta(x, u) == value(f(x, u)) - value(x)`` by construction.
    """

    def __init__(self, value_fn: Callable[[np.ndarray], np.ndarray], plant):
        self._value_fn = value_fn
        self.plant = plant
        self.state_dim = plant.state_dim

    def value(self, X) -> np.ndarray:
        return np.asarray(self._value_fn(np.asarray(X, dtype=float)), dtype=float)

    def next_values(self, X, actions) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        A = actions.actions if isinstance(actions, ActionSet) else np.asarray(actions, dtype=float)
        lead = X.shape[:-1]
        Xr = np.repeat(X.reshape(-1, X.shape[-1]), len(A), axis=0)
        Ur = np.tile(A, (int(np.prod(lead, dtype=int)), 1))
        return self.value(self.plant.step(Xr, Ur)).reshape(lead + (len(A),))

    def next_value(self, X, U) -> np.ndarray:
        return self.value(self.plant.step(np.asarray(X, dtype=float), np.asarray(U, dtype=float)))


class RolloutBarrier(ExactBarrier):
    """h(x) = min over k = 0..T of rho along the maneuver rollout from x."""

    def __init__(self, plant, gamma: Maneuver, rho, T: int = DEFAULT_HORIZON):
        if T < 1:
            raise ValueError(f"horizon must be >= 1, got {T}")
        self.gamma = gamma
        self.rho = rho
        self.T = T
        super().__init__(self._rollout, plant)

    def _rollout(self, X):
        return self.value_and_argmin(X)[0]

    def value_and_argmin(self, X):
        if _closed_form(self.gamma, self.plant):
            return constant_rollout_min(X, self.plant, self.gamma.control, self.rho, self.T, True)
        return rollout_min(X, self.gamma, self.plant.step, self.rho, self.T, return_argmin=True)


class MaxBarrier(BarrierFunction):
    """Pointwise maximum of two barriers over the same state space."""

    def __init__(self, h1: BarrierFunction, h2: BarrierFunction):
        if getattr(h1, "state_dim", None) != getattr(h2, "state_dim", None):
            raise ValueError("max_compose needs barriers over the same state space")
        self.h1, self.h2 = h1, h2
        self.state_dim = h1.state_dim

    def value(self, X) -> np.ndarray:
        return np.maximum(self.h1.value(X), self.h2.value(X))

    def next_values(self, X, actions) -> np.ndarray:
        return np.maximum(self.h1.next_values(X, actions), self.h2.next_values(X, actions))

    def next_value(self, X, U) -> np.ndarray:
        return np.maximum(self.h1.next_value(X, U), self.h2.next_value(X, U))


def max_compose(h1: BarrierFunction, h2: BarrierFunction) -> MaxBarrier:
    return MaxBarrier(h1, h2)


def barrier_slack(next_value, value, lam: float):
    """``delta + lam * value`` written as ``next - (1 - lam) * value``."""
    return next_value - (1.0 - lam) * value


def admissible(h: BarrierFunction, x, u, lam: float = 1.0):
    """True where ``h.delta(x, u) + lam * h.value(x) >= 0``."""
    _check_lambda(lam)
    ok = barrier_slack(h.next_value(x, u), h.value(x), lam) >= 0
    return bool(ok) if np.ndim(ok) == 0 else ok


def _check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")


@dataclass(frozen=True)
class FilterConfig:
    """Safety-filter settings.

    ``on_infeasible`` is ``"max_slack"`` (apply the action with the largest
    barrier slack) or ``"raise"``.
    """

    action_set: ActionSet
    lam: float = 1.0
    on_infeasible: str = "max_slack"

    def __post_init__(self):
        _check_lambda(self.lam)
        if self.on_infeasible not in ("max_slack", "raise"):
            raise ValueError(f"unknown infeasibility policy {self.on_infeasible!r}")
        if len(self.action_set) == 0:
            raise ValueError("empty action set")


class FilterResult(NamedTuple):
    u: np.ndarray
    overridden: bool
    feasible: bool


@dataclass
class FilterBatch:
    """Batched filter output; ``index`` points into the action set."""

    index: np.ndarray
    u: np.ndarray
    overridden: np.ndarray
    feasible: np.ndarray
    slack: np.ndarray = field(repr=False)


def filter_batch(h: BarrierFunction, X, U_nom, cfg: FilterConfig) -> FilterBatch:
    """Minimal-deviation admissible action for each row of X.

    Ties in ``||u - u_nom||^2`` go to the lowest action index. When no
    action is admissible the max-slack action is used (lowest index on ties).
    """
    X = np.asarray(X, dtype=float).reshape(-1, h.state_dim)
    A = cfg.action_set.actions
    U_nom = np.asarray(U_nom, dtype=float).reshape(len(X), A.shape[1])
    slack = barrier_slack(h.next_values(X, A), h.value(X)[:, None], cfg.lam)
    ok = slack >= 0
    cost = np.sum((A[None, :, :] - U_nom[:, None, :]) ** 2, axis=-1)
    cost = np.where(ok, cost, np.inf)
    feasible = ok.any(axis=1)
    if cfg.on_infeasible == "raise" and not feasible.all():
        raise InfeasibleError(f"{int((~feasible).sum())} state(s) have no admissible action")
    idx = np.where(feasible, np.argmin(cost, axis=1), np.argmax(slack, axis=1))
    U = A[idx]
    overridden = np.any(U != U_nom, axis=1)
    return FilterBatch(idx, U, overridden, feasible, slack)


def safety_filter(h: BarrierFunction, x, u_nom, cfg: FilterConfig) -> FilterResult:
    """Filter a single state; see :func:`filter_batch`."""
    out = filter_batch(h, np.asarray(x, dtype=float)[None], np.atleast_1d(u_nom)[None], cfg)
    return FilterResult(out.u[0].copy(), bool(out.overridden[0]), bool(out.feasible[0]))


class FilteredManeuver:
    """State-feedback maneuver ``x -> safety_filter(h, x, nominal(x))``.

    Used as the evasive maneuver of the next barrier in the expansion.
    """

    def __init__(self, h: BarrierFunction, nominal: Maneuver, cfg: FilterConfig):
        self.h = h
        self.nominal = nominal
        self.cfg = cfg

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        lead = X.shape[:-1]
        flat = X.reshape(-1, X.shape[-1])
        out = filter_batch(self.h, flat, self.nominal(flat), self.cfg)
        return out.u.reshape(lead + (out.u.shape[-1],))


def fw_uav_rollout_barrier(gamma: Maneuver, rho: SafetyFunction = SafetyFunction(),
                           params: PlantParams = PlantParams(), T: int = DEFAULT_HORIZON) -> RolloutBarrier:
    return RolloutBarrier(FixedWingPlant(params), gamma, rho, T)


__all__ = [
    "BarrierFunction",
    "ConstantManeuver",
    "ExactBarrier",
    "FilterBatch",
    "FilterConfig",
    "FilterResult",
    "FilteredManeuver",
    "InfeasibleError",
    "MaxBarrier",
    "RolloutBarrier",
    "SafetyFunction",
    "admissible",
    "barrier_slack",
    "distance",
    "filter_batch",
    "fw_uav_rollout_barrier",
    "gamma_straight",
    "gamma_turn",
    "max_compose",
    "position_safety",
    "rollout_barrier",
    "rollout_min",
    "safety_filter",
]
