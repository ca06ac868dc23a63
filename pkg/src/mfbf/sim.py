"""Two-vehicle episode simulation, collision statistics and safe-set grids.

Episodes are simulated in lockstep batches: every step applies the policy to
all live episodes at once. Batches are split into fixed-size chunks so that
results do not depend on how many worker processes evaluate them.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from .barrier import (
    BarrierFunction,
    FilterConfig,
    RolloutBarrier,
    SafetyFunction,
    distance,
    filter_batch,
    gamma_straight,
    gamma_turn,
)
from .dynamics import (
    FixedWingPlant,
    PlantParams,
    VehicleControl,
    VehicleState,
    make_action_set,
    wrap_angle,
)

log = logging.getLogger(__name__)

CHUNK_SIZE = 256
DEFAULT_EPISODE_STEPS = 500
OMEGA_EXP = float(np.radians(12.0))
EXPERIMENT_OMEGAS = (-OMEGA_EXP, 0.0, OMEGA_EXP)
EXPERIMENT_SWAP_ANGLE = float(np.radians(45.0))
EXPERIMENT_REACH = 5.0
HEADINGS = {"left": np.pi, "up": np.pi / 2, "right": 0.0, "down": -np.pi / 2}

# heading residuals closer than this count as ties
_TIE_TOL = 1e-9


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    z: float = 0.0
    capture_radius: float = 10.0

    def __post_init__(self):
        if not self.capture_radius > 0:
            raise ValueError(f"capture_radius must be positive, got {self.capture_radius}")


def choose_omega(theta, desired, omega_choices: Sequence[float], dt: float) -> np.ndarray:
    """Index of the turn rate leaving the smallest heading error after one step.

    Exact ties go to the largest turn rate, so a target dead astern is
    approached with a left (positive) turn.
    """
    if len(omega_choices) == 0:
        raise ValueError("empty action choices")
    w = np.asarray(omega_choices, dtype=float)
    theta = np.asarray(theta, dtype=float)[..., None]
    desired = np.asarray(desired, dtype=float)[..., None]
    err = np.abs(wrap_angle(desired - (theta + w * dt)))
    best = err.min(axis=-1, keepdims=True)
    tied = err <= best + _TIE_TOL
    # among tied options pick the largest omega
    score = np.where(tied, w, -np.inf)
    return np.argmax(score, axis=-1)


def waypoint_controller(x: VehicleState, wp: Waypoint, action_choices: Sequence[float],
                        v: float = 15.0, zeta: float = 0.0, dt: float = 0.1) -> VehicleControl:
    """Steer one vehicle toward ``wp`` with the best available turn rate."""
    desired = np.arctan2(wp.y - x.py, wp.x - x.px)
    i = int(choose_omega(x.theta, desired, action_choices, dt))
    return VehicleControl(v, float(action_choices[i]), zeta)


@dataclass
class Decision:
    u: np.ndarray
    overridden: np.ndarray
    feasible: np.ndarray


class WaypointPolicy:
    """Nominal controller: each vehicle follows its own waypoint list.

    Without explicit waypoints each vehicle heads for the other's starting
    position rotated counterclockwise by ``swap_angle`` (radians) about its
    own start. With ``swap_angle = 0`` the two simply trade places.
    ``reach`` scales that offset; values above 1 put the waypoint beyond the
    encounter so vehicles fly through instead of circling their target.
    """

    def __init__(self, omega_choices: Sequence[float] = EXPERIMENT_OMEGAS, v: float = 15.0,
                 zeta: float = 0.0, params: PlantParams = PlantParams(), capture_radius: float = 10.0,
                 waypoints: Sequence[Sequence[Waypoint]] | None = None, swap_angle: float = 0.0,
                 reach: float = 1.0):
        if len(omega_choices) == 0:
            raise ValueError("empty action choices")
        if not reach > 0:
            raise ValueError(f"reach must be positive, got {reach}")
        self.swap_angle = float(swap_angle)
        self.reach = float(reach)
        self.omega_choices = np.asarray(omega_choices, dtype=float)
        self.v, self.zeta, self.dt = v, zeta, params.dt
        self.capture_radius = capture_radius
        self.action_set = make_action_set(self.omega_choices, v, zeta, params)
        self.waypoints = waypoints

    def start(self, X0) -> "_WaypointRun":
        X0 = np.asarray(X0, dtype=float)
        B = len(X0)
        if self.waypoints is None:
            tracks = self._swap(X0)[:, :, None, :]
            radii = np.full((B, 2, 1), self.capture_radius)
        else:
            K = max(len(w) for w in self.waypoints)
            tracks = np.empty((2, K, 3))
            radii = np.empty((2, K))
            for i, wps in enumerate(self.waypoints):
                # pad short lists by repeating the final waypoint
                wps = list(wps) + [wps[-1]] * (K - len(wps))
                tracks[i] = [(w.x, w.y, w.z) for w in wps]
                radii[i] = [w.capture_radius for w in wps]
            tracks = np.broadcast_to(tracks, (B,) + tracks.shape)
            radii = np.broadcast_to(radii, (B,) + radii.shape)
        return _WaypointRun(self, tracks, radii)

    def _swap(self, X0) -> np.ndarray:
        out = np.stack([X0[:, [4, 5, 7]], X0[:, [0, 1, 3]]], axis=1)
        if self.swap_angle or self.reach != 1.0:
            c, s = self.reach * np.cos(self.swap_angle), self.reach * np.sin(self.swap_angle)
            for i, k in enumerate((0, 4)):
                dx, dy = out[:, i, 0] - X0[:, k], out[:, i, 1] - X0[:, k + 1]
                out[:, i, 0] = X0[:, k] + c * dx - s * dy
                out[:, i, 1] = X0[:, k + 1] + s * dx + c * dy
        return out


class _WaypointRun:
    def __init__(self, policy: WaypointPolicy, tracks, radii):
        self.p = policy
        self.tracks = tracks
        self.radii = radii
        self.cursor = np.zeros(tracks.shape[:2], dtype=int)

    def act(self, X) -> Decision:
        p = self.p
        B = len(X)
        K = self.tracks.shape[2]
        rows = np.arange(B)
        idx = []
        for i, s in enumerate((0, 4)):
            pos = X[:, [s, s + 1, s + 3]]
            wp = self.tracks[rows, i, self.cursor[:, i]]
            hit = np.linalg.norm(wp - pos, axis=1) <= self.radii[rows, i, self.cursor[:, i]]
            self.cursor[:, i] = np.where(hit, np.minimum(self.cursor[:, i] + 1, K - 1), self.cursor[:, i])
            wp = self.tracks[rows, i, self.cursor[:, i]]
            desired = np.arctan2(wp[:, 1] - pos[:, 1], wp[:, 0] - pos[:, 0])
            idx.append(choose_omega(X[:, s + 2], desired, p.omega_choices, p.dt))
        joint = idx[0] * len(p.omega_choices) + idx[1]
        return Decision(p.action_set.actions[joint], np.zeros(B, bool), np.ones(B, bool))


class ManeuverPolicy:
    """Stateless policy from a maneuver map."""

    def __init__(self, gamma):
        self.gamma = gamma

    def start(self, X0):
        return self

    def act(self, X) -> Decision:
        U = np.array(self.gamma(X), dtype=float).reshape(len(X), -1)
        return Decision(U, np.zeros(len(X), bool), np.ones(len(X), bool))


class FilteredPolicy:
    """Nominal policy passed through the discrete safety filter."""

    def __init__(self, nominal, barrier: BarrierFunction, cfg: FilterConfig):
        self.nominal = nominal
        self.barrier = barrier
        self.cfg = cfg

    def start(self, X0):
        return _FilteredRun(self, self.nominal.start(X0))


class _FilteredRun:
    def __init__(self, policy: FilteredPolicy, nominal_run):
        self.p = policy
        self.nominal_run = nominal_run

    def act(self, X) -> Decision:
        nom = self.nominal_run.act(X)
        out = filter_batch(self.p.barrier, X, nom.u, self.p.cfg)
        return Decision(out.u, out.overridden, out.feasible)


@dataclass
class EpisodeBatch:
    """Per-episode statistics of a lockstep batch.

    ``rho_min`` covers steps 0..T, ``rho_min_tail`` steps 1..T. ``u0`` is
    the first control actually applied.
    """

    rho_min: np.ndarray
    rho_min_tail: np.ndarray
    min_distance: np.ndarray
    u0: np.ndarray
    override_count: np.ndarray
    infeasible_count: np.ndarray
    trajectory: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.rho_min)

    @classmethod
    def concat(cls, parts: Sequence["EpisodeBatch"]) -> "EpisodeBatch":
        traj = None if parts[0].trajectory is None else np.concatenate([p.trajectory for p in parts])
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("rho_min", "rho_min_tail", "min_distance", "u0", "override_count", "infeasible_count")),
                   trajectory=traj)


def simulate(X0, policy, plant, rho, T: int, first_controls=None, keep_trajectory: bool = False,
             distance_fn=distance) -> EpisodeBatch:
    """Run a batch of episodes for T steps under ``policy``.

    ``first_controls`` (one row per episode) replaces the policy's first
    decision; the policy is still stepped so stateful nominal controllers
    stay in sync.
    """
    if T < 1:
        raise ValueError(f"episode length must be >= 1, got {T}")
    X = np.array(X0, dtype=float, ndmin=2)
    B = len(X)
    run = policy.start(X)
    r0 = rho(X)
    tail = np.full(B, np.inf)
    dmin = distance_fn(X) if distance_fn is not None else np.full(B, np.nan)
    overrides = np.zeros(B, dtype=int)
    infeasible = np.zeros(B, dtype=int)
    traj = [X] if keep_trajectory else None
    u0 = None
    for k in range(T):
        dec = run.act(X)
        U = dec.u
        if k == 0:
            if first_controls is not None:
                U = np.asarray(first_controls, dtype=float).reshape(B, -1)
            u0 = U.copy()
        overrides += dec.overridden
        infeasible += ~dec.feasible
        X = plant.step(X, U)
        tail = np.minimum(tail, rho(X))
        if distance_fn is not None:
            dmin = np.minimum(dmin, distance_fn(X))
        if keep_trajectory:
            traj.append(X)
    return EpisodeBatch(
        rho_min=np.minimum(r0, tail),
        rho_min_tail=tail,
        min_distance=dmin,
        u0=u0,
        override_count=overrides,
        infeasible_count=infeasible,
        trajectory=np.stack(traj, axis=1) if keep_trajectory else None,
    )


def _simulate_chunk(bounds, X0, policy, plant, rho, T, first_controls, keep_trajectory, distance_fn):
    lo, hi = bounds
    fc = None if first_controls is None else first_controls[lo:hi]
    return simulate(X0[lo:hi], policy, plant, rho, T, fc, keep_trajectory, distance_fn)


def simulate_chunked(X0, policy, plant, rho, T: int, first_controls=None, keep_trajectory: bool = False,
                     distance_fn=distance, jobs: int = 1, chunk_size: int = CHUNK_SIZE) -> EpisodeBatch:
    """:func:`simulate` over fixed-size chunks, optionally on a process pool.

    Chunk boundaries do not depend on ``jobs``, so any worker count gives
    identical results.
    """
    X0 = np.array(X0, dtype=float, ndmin=2)
    n = len(X0)
    bounds = [(lo, min(lo + chunk_size, n)) for lo in range(0, n, chunk_size)]
    fn = partial(_simulate_chunk, X0=X0, policy=policy, plant=plant, rho=rho, T=T,
                 first_controls=first_controls, keep_trajectory=keep_trajectory, distance_fn=distance_fn)
    if jobs <= 1 or len(bounds) <= 1:
        parts = [fn(b) for b in bounds]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(fn, bounds))
    return EpisodeBatch.concat(parts)


# ---------------------------------------------------------------------------
# single episodes and scenarios


@dataclass
class EpisodeConfig:
    x0: np.ndarray
    waypoints: tuple[tuple[Waypoint, ...], tuple[Waypoint, ...]] | None = None
    T: int = DEFAULT_EPISODE_STEPS
    barrier: str = "none"
    lam: float = 1.0
    ds: float = 25.0
    seed: int = 0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(8)
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.barrier not in ("none", "exact-straight", "exact-turn", "learned"):
            raise ValueError(f"unknown barrier choice {self.barrier!r}")


@dataclass
class EpisodeResult:
    min_distance: float
    collided: bool
    override_count: int
    infeasible_count: int
    trajectory: np.ndarray | None = field(default=None, repr=False)


def exact_barrier(kind: str, ds: float = 25.0, clip: float | None = 50.0,
                  params: PlantParams = PlantParams(), T: int = 500) -> RolloutBarrier:
    """Rollout barrier for ``"exact-straight"`` or ``"exact-turn"``."""
    gammas = {"exact-straight": gamma_straight, "exact-turn": gamma_turn,
              "straight": gamma_straight, "turn": gamma_turn}
    if kind not in gammas:
        raise ValueError(f"unknown exact barrier {kind!r}")
    return RolloutBarrier(FixedWingPlant(params), gammas[kind](params=params), SafetyFunction(ds, clip), T)


def run_episode(cfg: EpisodeConfig, plant: FixedWingPlant | None = None,
                barrier: BarrierFunction | None = None, keep_trajectory: bool = True,
                omega_choices: Sequence[float] = EXPERIMENT_OMEGAS) -> EpisodeResult:
    """Simulate one episode; the filter is active iff ``barrier`` is given."""
    plant = plant or FixedWingPlant()
    nominal = WaypointPolicy(omega_choices, params=plant.params, waypoints=cfg.waypoints)
    policy = nominal
    if barrier is not None:
        policy = FilteredPolicy(nominal, barrier, FilterConfig(nominal.action_set, cfg.lam))
    rho = SafetyFunction(cfg.ds, None)
    out = simulate(cfg.x0[None], policy, plant, rho, cfg.T, keep_trajectory=keep_trajectory)
    dmin = float(out.min_distance[0])
    return EpisodeResult(dmin, dmin < cfg.ds, int(out.override_count[0]), int(out.infeasible_count[0]),
                         None if out.trajectory is None else out.trajectory[0])


def turn_radius(v: float = 15.0, omega: float = OMEGA_EXP) -> float:
    return v / omega


def scenario(name: str, separation: float = 600.0, gap: float = 100.0, **kwargs) -> EpisodeConfig:
    """Canned configurations.

    ``head_on``: vehicles at (-sep/2, 0) heading +x and (sep/2, 0) heading -x.
    ``pass_left``: as head-on but vehicle 2 offset by ``gap`` to vehicle 1's
    left, each flying its own lane.
    ``parallel``: both heading +x, ``gap`` apart laterally.
    Waypoints sit at the far end of each vehicle's lane.
    """
    half = separation / 2
    if name == "head_on":
        x0 = [-half, 0, 0, 0, half, 0, np.pi, 0]
        wps = ((Waypoint(half, 0.0),), (Waypoint(-half, 0.0),))
    elif name == "pass_left":
        x0 = [-half, 0, 0, 0, half, gap, np.pi, 0]
        wps = ((Waypoint(half, 0.0),), (Waypoint(-half, gap),))
    elif name == "parallel":
        x0 = [-half, 0, 0, 0, -half, gap, 0, 0]
        wps = ((Waypoint(10 * separation, 0.0),), (Waypoint(10 * separation, gap),))
    else:
        raise ValueError(f"unknown scenario {name!r}")
    return EpisodeConfig(np.array(x0, dtype=float), wps, **kwargs)


# ---------------------------------------------------------------------------
# collision statistics


@dataclass(frozen=True)
class SamplerSpec:
    """Uniform box for initial states; one RNG stream per episode index."""

    lower: tuple[float, ...] = (-200.0, -200.0, -np.pi, 0.0, -200.0, -200.0, -np.pi, 0.0)
    upper: tuple[float, ...] = (200.0, 200.0, np.pi, 0.0, 200.0, 200.0, np.pi, 0.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("sampler needs lower <= upper with matching shapes")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def sample(self, indices, seed: int | None = None) -> np.ndarray:
        """States for the given episode indices; independent of batching."""
        seed = self.seed if seed is None else seed
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        out = np.empty((len(indices), self.dim))
        for r, j in enumerate(indices):
            rng = np.random.default_rng([seed, int(j)])
            out[r] = lo + (hi - lo) * rng.random(self.dim)
        return out


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = binomtest(k, n).proportion_ci(confidence, method="wilson")
    return float(ci.low), float(ci.high)


def sample_starts(n: int, sampler: SamplerSpec, barriers: Sequence[BarrierFunction], rho,
                  seed: int | None = None, block: int = 512, max_draws: int = 1_000_000):
    """First ``n`` sampled states where rho and every barrier are >= 0.

    Returns the accepted states and their episode indices.
    """
    accepted, idx = [], []
    j = 0
    while len(idx) < n:
        if j >= max_draws:
            raise RuntimeError(f"only {len(idx)} of {n} starts accepted after {j} draws")
        cand_idx = np.arange(j, j + block)
        X = sampler.sample(cand_idx, seed)
        ok = rho(X) >= 0
        for h in barriers:
            ok &= h.value(X) >= 0
        accepted.append(X[ok])
        idx.extend(cand_idx[ok].tolist())
        j += block
    return np.concatenate(accepted)[:n], np.asarray(idx[:n])


@dataclass
class RateRow:
    variant: str
    episodes: int
    collisions: int
    rate_pct: float
    ci_low_pct: float
    ci_high_pct: float
    overrides: int
    infeasible_steps: int


def evaluate_collision_rates(n_episodes: int, variants: dict[str, BarrierFunction | None],
                             sampler: SamplerSpec = SamplerSpec(), T: int = DEFAULT_EPISODE_STEPS,
                             ds: float = 25.0, lam: float = 1.0, params: PlantParams = PlantParams(),
                             seed: int | None = None, jobs: int = 1, start_filter=None,
                             omega_choices: Sequence[float] = EXPERIMENT_OMEGAS,
                             nominal: WaypointPolicy | None = None):
    """Collision percentage per barrier variant on shared starting states.

    Starts are accepted only where every configured barrier (and
    ``start_filter`` barriers, if given) is nonnegative, so all variants see
    the same episodes. ``None`` means the nominal controller alone; by
    default it is the waypoint follower over ``omega_choices`` with the
    experiment's rotated swap layout.

    Returns ``(rows, starts, start_indices, per_variant_batches)``; the
    indices are the sampler episode numbers of the accepted starts.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    plant = FixedWingPlant(params)
    rho = SafetyFunction(ds, None)
    gate = [h for h in variants.values() if h is not None] + list(start_filter or [])
    X0, idx = sample_starts(n_episodes, sampler, gate, rho, seed)
    if nominal is None:
        nominal = WaypointPolicy(omega_choices, params=params, swap_angle=EXPERIMENT_SWAP_ANGLE,
                                 reach=EXPERIMENT_REACH)
    rows, batches = [], {}
    for name, h in variants.items():
        policy = nominal if h is None else FilteredPolicy(nominal, h, FilterConfig(nominal.action_set, lam))
        out = simulate_chunked(X0, policy, plant, rho, T, jobs=jobs)
        k = int(np.sum(out.min_distance < ds))
        lo, hi = wilson_interval(k, n_episodes)
        rows.append(RateRow(name, n_episodes, k, 100.0 * k / n_episodes, 100 * lo, 100 * hi,
                            int(out.override_count.sum()), int(out.infeasible_count.sum())))
        batches[name] = out
        log.info("variant %s: %d/%d collisions", name, k, n_episodes)
    return rows, X0, idx, batches


def write_rate_table(rows: Sequence[RateRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "episodes", "collisions", "rate_pct", "ci_low_pct", "ci_high_pct",
                    "overrides", "infeasible_steps"])
        for r in rows:
            w.writerow([r.variant, r.episodes, r.collisions, repr(r.rate_pct), repr(r.ci_low_pct),
                        repr(r.ci_high_pct), r.overrides, r.infeasible_steps])


def write_episode_summary(path, seeds, batch: EpisodeBatch, ds: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "min_distance", "collided", "override_count", "infeasible_count"])
        for s, d, o, i in zip(seeds, batch.min_distance, batch.override_count, batch.infeasible_count):
            w.writerow([int(s), repr(float(d)), int(d < ds), int(o), int(i)])


# ---------------------------------------------------------------------------
# safe-set grids


@dataclass(frozen=True)
class GridSpec:
    """Vehicle 1 fixed; vehicle 2 swept over an x-y grid with fixed heading."""

    heading2: float = np.pi
    vehicle1: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    x_range: tuple[float, float] = (-200.0, 200.0)
    y_range: tuple[float, float] = (-200.0, 200.0)
    nx: int = 81
    ny: int = 81
    z2: float = 0.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid cell counts must be >= 1")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(*self.x_range, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(*self.y_range, self.ny)

    def states(self) -> np.ndarray:
        """Joint states, row-major with y slowest: shape (ny * nx, 8)."""
        gx, gy = np.meshgrid(self.xs, self.ys)
        n = gx.size
        X = np.empty((n, 8))
        X[:, :4] = self.vehicle1
        X[:, 4] = gx.ravel()
        X[:, 5] = gy.ravel()
        X[:, 6] = wrap_angle(self.heading2)
        X[:, 7] = self.z2
        return X


@dataclass
class GridResult:
    spec: GridSpec
    h: np.ndarray  # (ny, nx)

    @property
    def unsafe(self) -> np.ndarray:
        return self.h < 0

    @property
    def unsafe_count(self) -> int:
        return int(self.unsafe.sum())

    def to_csv(self, path) -> None:
        gx, gy = np.meshgrid(self.spec.xs, self.spec.ys)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "h", "unsafe"])
            for x, y, h in zip(gx.ravel(), gy.ravel(), self.h.ravel()):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(h)), int(h < 0)])


def grid_unsafe_set(barrier: BarrierFunction, grid: GridSpec = GridSpec(), block: int = 4096) -> GridResult:
    """Evaluate ``barrier`` on every grid cell (in fixed-size blocks)."""
    X = grid.states()
    h = np.concatenate([np.asarray(barrier.value(X[i:i + block]), dtype=float)
                        for i in range(0, len(X), block)])
    return GridResult(grid, h.reshape(grid.ny, grid.nx))


def default_grids(**kwargs) -> dict[str, GridSpec]:
    """The four canonical vehicle-2 headings."""
    return {name: GridSpec(heading2=th, **kwargs) for name, th in HEADINGS.items()}


def write_grids(barrier: BarrierFunction, out_dir, prefix: str = "grid", **kwargs) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, spec in default_grids(**kwargs).items():
        p = out_dir / f"{prefix}_{name}.csv"
        grid_unsafe_set(barrier, spec).to_csv(p)
        paths[name] = p
    return paths
