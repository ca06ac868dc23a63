"""Rollout datasets: generation and the CSV file format.

CSV columns: ``x0_0 .. x0_{n-1}, u_idx, rho_min, rho_min_tail``.
``u_idx`` is -1 and ``rho_min_tail`` empty when no delta sample was
recorded for the row. Floats are written with ``repr`` so files round-trip
exactly and are byte-identical across reruns.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..dynamics import ActionSet
from ..sim import ManeuverPolicy, SamplerSpec, simulate_chunked


@dataclass(frozen=True)
class RolloutSample:
    x0: np.ndarray
    rho_min: float


@dataclass(frozen=True)
class DeltaSample:
    x0: np.ndarray
    u0: np.ndarray
    u_idx: int
    rho_min_tail: float


@dataclass
class Dataset:
    """Column-oriented rollout data, one row per episode."""

    x0: np.ndarray
    rho_min: np.ndarray
    u_idx: np.ndarray | None = None
    rho_min_tail: np.ndarray | None = None
    u0: np.ndarray | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.rho_min = np.asarray(self.rho_min, dtype=float)
        n = len(self.x0)
        if len(self.rho_min) != n:
            raise ValueError("column length mismatch")
        if self.u_idx is None:
            self.u_idx = np.full(n, -1, dtype=int)
        if self.rho_min_tail is None:
            self.rho_min_tail = np.full(n, np.nan)

    def __len__(self):
        return len(self.x0)

    @property
    def has_delta(self) -> np.ndarray:
        return self.u_idx >= 0

    def rollout_samples(self) -> list[RolloutSample]:
        return [RolloutSample(x, float(r)) for x, r in zip(self.x0, self.rho_min)]

    def delta_samples(self, action_set: ActionSet | None = None) -> list[DeltaSample]:
        out = []
        for i in np.flatnonzero(self.has_delta):
            u0 = self.u0[i] if self.u0 is not None else (
                action_set.actions[self.u_idx[i]] if action_set is not None else None)
            out.append(DeltaSample(self.x0[i], u0, int(self.u_idx[i]), float(self.rho_min_tail[i])))
        return out

    def to_csv(self, path) -> None:
        d = self.x0.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x0_{i}" for i in range(d)] + ["u_idx", "rho_min", "rho_min_tail"])
            for x, u, r, t in zip(self.x0, self.u_idx, self.rho_min, self.rho_min_tail):
                w.writerow([repr(float(v)) for v in x] + [int(u), repr(float(r)),
                                                        "" if np.isnan(t) else repr(float(t))])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(1 for h in header if h.startswith("x0_"))
        x0 = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
        u = np.array([int(r[d]) for r in body], dtype=int)
        rho = np.array([float(r[d + 1]) for r in body])
        tail = np.array([float(r[d + 2]) if r[d + 2] else np.nan for r in body])
        return cls(x0, rho, u, tail)


def generate_dataset(plant, rho, policy, sampler: SamplerSpec, N: int, T: int,
                     record_delta: bool = False, action_set: ActionSet | None = None,
                     seed: int | None = None, jobs: int = 1, X0=None) -> Dataset:
    """Run N episodes from sampled starts and record ``(x0, rho_min)``.

    ``policy`` is an episodic policy (``start``/``act``) or a plain maneuver
    map. With ``record_delta`` each episode is paired with a second run from
    the same start whose first action is drawn uniformly from ``action_set``;
    that run supplies ``u_idx`` and ``rho_min_tail`` (minimum over the
    states after the first step).
    """
    if N < 1 or T < 1:
        raise ValueError("N and T must be >= 1")
    if not hasattr(policy, "start"):
        policy = ManeuverPolicy(policy)
    seed = sampler.seed if seed is None else seed
    if X0 is None:
        X0 = sampler.sample(range(N), seed)
    X0 = np.asarray(X0, dtype=float)
    if len(X0) != N:
        raise ValueError("X0 must have N rows")
    main = simulate_chunked(X0, policy, plant, rho, T, distance_fn=None, jobs=jobs)
    data = Dataset(X0, main.rho_min, u0=main.u0)
    if record_delta:
        if action_set is None:
            raise ValueError("record_delta needs an action_set")
        idx = np.array([np.random.default_rng([seed, j, 1]).integers(len(action_set)) for j in range(N)])
        explore = simulate_chunked(X0, policy, plant, rho, T, first_controls=action_set.actions[idx],
                                   distance_fn=None, jobs=jobs)
        data.u_idx = idx
        data.rho_min_tail = explore.rho_min_tail
        data.u0 = explore.u0
    return data


__all__ = ["Dataset", "DeltaSample", "RolloutSample", "SamplerSpec", "generate_dataset"]
