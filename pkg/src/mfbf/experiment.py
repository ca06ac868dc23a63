"""End-to-end learning experiment on the two-vehicle fixed-wing plant.

An initial regressor is fit to nominal-controller episodes, the safe set is
expanded ``L`` times with the max-target update, and every iterate is scored
by validation over-prediction, unsafe cells of the default grids and the
collision rate of the filtered controller against the nominal one on shared
nonnegative-barrier starts.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

from .barrier import SafetyFunction
from .dynamics import FixedWingPlant, PlantParams
from .learning import (
    Iteration,
    LearnedBarrier,
    TrainConfig,
    derive_seed,
    fit_initial_barrier,
    iterate_expansion,
    overprediction_rate,
)
from .sim import (
    EXPERIMENT_OMEGAS,
    EXPERIMENT_REACH,
    EXPERIMENT_SWAP_ANGLE,
    SamplerSpec,
    WaypointPolicy,
    default_grids,
    evaluate_collision_rates,
    grid_unsafe_set,
)

log = logging.getLogger(__name__)


def desk_train_config(**kw) -> TrainConfig:
    """2 x 128 network trained with Adam; converges within a laptop budget."""
    kw = {"hidden": (128, 128), "epochs": 2000, "optimizer": "adam", "lr": 1e-3, **kw}
    return TrainConfig(**kw)


@dataclass
class ExperimentConfig:
    n_initial: int = 5000
    n_per_iteration: int = 2000
    iterations: int = 3
    n_eval: int = 2000
    T: int = 500
    ds: float = 25.0
    clip: float = 50.0
    lam: float = 1.0
    initial_cfg: TrainConfig = field(default_factory=desk_train_config)
    # warm-started iterations fine-tune at a lower rate so the model moves smoothly
    iteration_cfg: TrainConfig = field(default_factory=lambda: desk_train_config(lr=3e-4))
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    params: PlantParams = field(default_factory=PlantParams)
    swap_angle: float = EXPERIMENT_SWAP_ANGLE
    reach: float = EXPERIMENT_REACH
    seed: int = 0
    jobs: int = 1


def unsafe_cells(barrier) -> int:
    """Total unsafe cells over the four default heading grids."""
    return sum(grid_unsafe_set(barrier, g).unsafe_count for g in default_grids().values())


@dataclass
class ExperimentResult:
    initial: LearnedBarrier
    initial_metrics: dict
    iterations: list[Iteration]
    rates: list[dict]
    runtime: float


def run_experiment(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    t0 = time.perf_counter()
    plant = FixedWingPlant(cfg.params)
    rho = SafetyFunction(cfg.ds, cfg.clip)
    nominal = WaypointPolicy(EXPERIMENT_OMEGAS, params=cfg.params, swap_angle=cfg.swap_angle,
                             reach=cfg.reach)
    icfg = replace(cfg.initial_cfg, seed=derive_seed(cfg.seed, 0, 1))
    model, data, y = fit_initial_barrier(plant, rho, nominal, cfg.sampler, cfg.n_initial, cfg.T, icfg,
                                         clip=cfg.clip, seed=derive_seed(cfg.seed, 0), jobs=cfg.jobs)
    h0 = LearnedBarrier(model, icfg.n_sigma, icfg.mc_samples, plant=plant)
    va = model.history["val_index"]
    initial_metrics = {
        "iteration": 0,
        "val_mse": model.history["val_loss"][-1],
        "overpred_pct": 100.0 * overprediction_rate(h0, data.x0[va], y[va]),
        "unsafe_cells": unsafe_cells(h0),
    }
    log.info("initial barrier: %s", initial_metrics)

    iters = iterate_expansion(h0, cfg.iterations, rho, cfg.n_per_iteration, nominal, cfg.T, plant,
                              cfg.sampler, cfg.iteration_cfg, lam=cfg.lam, clip=cfg.clip, seed=cfg.seed,
                              jobs=cfg.jobs, grid_metric=unsafe_cells)
    rates = []
    for it in iters:
        rows, _, _, _ = evaluate_collision_rates(
            cfg.n_eval, {"none": None, "learned": it.barrier}, cfg.sampler, cfg.T, cfg.ds, cfg.lam,
            cfg.params, seed=derive_seed(cfg.seed, it.index, 2), jobs=cfg.jobs,
            nominal=nominal)
        r = {row.variant: row for row in rows}
        rates.append({"iteration": it.index, "nominal_pct": r["none"].rate_pct,
                      "learned_pct": r["learned"].rate_pct, "rows": rows})
        it.metrics["nominal_pct"] = r["none"].rate_pct
        it.metrics["learned_pct"] = r["learned"].rate_pct
        log.info("iteration %d rates: nominal %.2f%%, learned %.2f%%", it.index,
                 r["none"].rate_pct, r["learned"].rate_pct)
    return ExperimentResult(h0, initial_metrics, iters, rates, time.perf_counter() - t0)


def summary(res: ExperimentResult) -> str:
    lines = [f"iter 0: {res.initial_metrics}"]
    lines += [f"iter {it.index}: " + ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                             for k, v in it.metrics.items()) for it in res.iterations]
    lines.append(f"runtime {res.runtime:.1f} s")
    return "\n".join(lines)


if __name__ == "__main__":  # pragma: no cover
    logging.basicConfig(level=logging.INFO)
    print(summary(run_experiment(ExperimentConfig(jobs=4))))
