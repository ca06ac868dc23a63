"""Iterative expansion of a learned barrier's safe set.

Each expansion runs N episodes in which the nominal controller is passed
through the safety filter of the current barrier, records the worst safety
value of every episode and fits a new regressor to ``x0 -> target``. The
plain variant uses ``rho_min`` as target; the ``_with_max`` variant uses
``max(h(x0), rho_min)`` so the admissible control set cannot shrink.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ..barrier import BarrierFunction, FilterConfig
from ..sim import FilteredPolicy, SamplerSpec
from .data import Dataset, generate_dataset
from .learned import LearnedBarrier
from .mlp import InputEncoder, MLPRegressor, TrainConfig, fit_regressor

log = logging.getLogger(__name__)


def derive_seed(master: int, *keys: int) -> int:
    """Stable 32-bit seed from a master seed and integer keys."""
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1)[0])


def encoder_for(sampler: SamplerSpec, plant, encode_angles: bool = True, n_actions: int = 0,
                pair_features: bool | None = None) -> InputEncoder:
    """Encoder over the sampler box; pair features default on for two vehicles."""
    if pair_features is None:
        pair_features = plant.state_dim == 8
    return InputEncoder(sampler.lower, sampler.upper, getattr(plant, "heading_indices", ()),
                        encode_angles, n_actions, pair_features)


def clip_targets(y, clip: float | None) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y if clip is None else np.clip(y, -clip, clip)


def overprediction_rate(barrier: LearnedBarrier, X, y) -> float:
    """Fraction of rows where the conservative value exceeds the true target."""
    return float(np.mean(barrier.value(X) > np.asarray(y)))


def fit_initial_barrier(plant, rho, nominal_policy, sampler: SamplerSpec, N: int, T: int,
                        cfg: TrainConfig, clip: float | None = 50.0, encoder: InputEncoder | None = None,
                        seed: int | None = None, jobs: int = 1):
    """Fit ``x0 -> rho_min`` on episodes of the unfiltered nominal controller.

    Returns ``(model, dataset, targets)``.
    """
    encoder = encoder or encoder_for(sampler, plant)
    data = generate_dataset(plant, rho, nominal_policy, sampler, N, T, seed=seed, jobs=jobs)
    y = clip_targets(data.rho_min, clip)
    model = fit_regressor(data.x0, y, cfg, encoder, target_scale=clip or 1.0)
    return model, data, y


def _expand(h, rho, N, u_nom_policy, T, plant, sampler, cfg, with_max, lam, action_set, clip,
            encoder, init, seed, jobs, X0):
    if N < 1:
        raise ValueError("N must be >= 1 (empty dataset)")
    action_set = action_set if action_set is not None else u_nom_policy.action_set
    encoder = encoder or encoder_for(sampler, plant)
    policy = FilteredPolicy(u_nom_policy, h, FilterConfig(action_set, lam))
    data = generate_dataset(plant, rho, policy, sampler, N, T, seed=seed, jobs=jobs, X0=X0)
    y = data.rho_min
    if with_max:
        y = np.maximum(h.value(data.x0), y)
    y = clip_targets(y, clip)
    model = fit_regressor(data.x0, y, cfg, encoder, target_scale=clip or 1.0, init=init)
    return model, data, y


def expand_safe_set(h: BarrierFunction, rho, N: int, u_nom_policy, T: int, plant, sampler: SamplerSpec,
                    cfg: TrainConfig, lam: float = 1.0, action_set=None, clip: float | None = 50.0,
                    encoder: InputEncoder | None = None, init: MLPRegressor | None = None,
                    seed: int | None = None, jobs: int = 1, X0=None, return_dataset: bool = False):
    """One expansion with targets ``rho_min`` of the filtered episodes."""
    model, data, y = _expand(h, rho, N, u_nom_policy, T, plant, sampler, cfg, False, lam, action_set,
                             clip, encoder, init, seed, jobs, X0)
    return (model, data, y) if return_dataset else model


def expand_safe_set_with_max(h: BarrierFunction, rho, N: int, u_nom_policy, T: int, plant,
                             sampler: SamplerSpec, cfg: TrainConfig, lam: float = 1.0, action_set=None,
                             clip: float | None = 50.0, encoder: InputEncoder | None = None,
                             init: MLPRegressor | None = None, seed: int | None = None, jobs: int = 1,
                             X0=None, return_dataset: bool = False):
    """One expansion with targets ``max(h(x0), rho_min)``."""
    model, data, y = _expand(h, rho, N, u_nom_policy, T, plant, sampler, cfg, True, lam, action_set,
                             clip, encoder, init, seed, jobs, X0)
    return (model, data, y) if return_dataset else model


@dataclass
class Iteration:
    index: int
    model: MLPRegressor
    barrier: LearnedBarrier
    dataset: Dataset = field(repr=False)
    targets: np.ndarray = field(repr=False)
    metrics: dict = field(default_factory=dict)


def iterate_expansion(h0: BarrierFunction, L: int, rho, N: int, u_nom_policy, T: int, plant,
                      sampler: SamplerSpec, cfg: TrainConfig, lam: float = 1.0, clip: float | None = 50.0,
                      seed: int = 0, jobs: int = 1, warm_start: bool = True, init: MLPRegressor | None = None,
                      start: int = 1, grid_metric: Callable[[LearnedBarrier], int] | None = None,
                      on_iteration: Callable[[Iteration], None] | None = None) -> list[Iteration]:
    """Run expansions ``start .. start + L - 1`` beginning from barrier ``h0``.

    Iteration ``i`` samples its starts with ``derive_seed(seed, i)`` and
    trains with ``derive_seed(seed, i, 1)``, so a
    run resumed from the checkpoint of iteration ``i - 1`` (pass it as
    ``h0`` and ``init`` with ``start=i``) repeats iteration ``i`` exactly.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    if init is None and warm_start and isinstance(h0, LearnedBarrier):
        init = h0.model_h
    out = []
    h = h0
    for i in range(start, start + L):
        it_seed = derive_seed(seed, i)
        it_cfg = replace(cfg, seed=derive_seed(seed, i, 1))
        model, data, y = expand_safe_set_with_max(
            h, rho, N, u_nom_policy, T, plant, sampler, it_cfg, lam=lam, clip=clip,
            init=init if warm_start else None, seed=it_seed, jobs=jobs, return_dataset=True)
        barrier = LearnedBarrier(model, cfg.n_sigma, cfg.mc_samples, plant=plant)
        va = model.history["val_index"]
        metrics = {
            "iteration": i,
            "val_mse": model.history["val_loss"][-1],
            "train_mse": model.history["train_loss"][-1],
            "overpred_pct": 100.0 * overprediction_rate(barrier, data.x0[va], y[va]) if len(va) else float("nan"),
            "mean_target": float(np.mean(y)),
        }
        if grid_metric is not None:
            metrics["unsafe_cells"] = int(grid_metric(barrier))
        log.info("iteration %d: %s", i, metrics)
        it = Iteration(i, model, barrier, data, y, metrics)
        out.append(it)
        if on_iteration is not None:
            on_iteration(it)
        h, init = barrier, model
    return out
