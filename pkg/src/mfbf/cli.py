"""Command-line interface.

Usage: ``mfbf COMMAND [--config FILE] [--seed N] [--jobs N] [--out DIR] [--set KEY=VALUE ...]``

Commands
  generate   roll out N episodes and write ``dataset.csv``
  train      fit the initial barrier to nominal episodes (``h0.json``)
  iterate    run L max-target expansions (``iter_001.json`` ..., ``metrics.csv``)
  evaluate   collision-rate table for barrier variants (``rates.csv``)
  grid       unsafe-set grids for the four vehicle-2 headings
  scenario   run a named two-vehicle scenario (``episode.csv``, ``trajectory.csv``)

Config files are flat JSON or YAML mappings over the keys of ``RunConfig``.
Precedence is flag > file > default. Every output gets a ``.meta.json``
sidecar with the resolved config, its hash and the master seed.

Exit codes: 0 success, 2 invalid configuration or arguments, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .barrier import FilterConfig, SafetyFunction
from .dynamics import FixedWingPlant, PlantParams
from .learning import (
    LearnedBarrier,
    MLPRegressor,
    TrainConfig,
    clip_targets,
    derive_seed,
    encoder_for,
    fit_regressor,
    generate_dataset,
    iterate_expansion,
    overprediction_rate,
)
from .sim import (
    FilteredPolicy,
    SamplerSpec,
    WaypointPolicy,
    default_grids,
    evaluate_collision_rates,
    exact_barrier,
    grid_unsafe_set,
    run_episode,
    scenario,
    write_episode_summary,
    write_rate_table,
)

log = logging.getLogger("mfbf")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
BARRIER_KINDS = ("none", "exact-straight", "exact-turn", "learned")
METRIC_COLUMNS = ("iteration", "val_mse", "train_mse", "overpred_pct", "mean_target", "unsafe_cells")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    """Flat run configuration; angles in degrees, distances in meters."""

    # plant
    dt: float = 0.1
    v_min: float = 10.0
    v_max: float = 20.0
    omega_max_deg: float = 12.0
    zeta_max: float = 5.0
    # action set
    omega_choices_deg: list = field(default_factory=lambda: [-12.0, 0.0, 12.0])
    v_fixed: float = 15.0
    zeta_fixed: float = 0.0
    # nominal waypoint: the other vehicle's start rotated by this angle about one's own start,
    # with the offset scaled by reach
    swap_angle_deg: float = 45.0
    reach: float = 5.0
    # initial-state box (x, y, heading in rad, z per vehicle)
    sampler_lower: list = field(default_factory=lambda: [-200.0, -200.0, -math.pi, 0.0] * 2)
    sampler_upper: list = field(default_factory=lambda: [200.0, 200.0, math.pi, 0.0] * 2)
    # safety
    ds: float = 25.0
    clip: float = 50.0
    lam: float = 1.0
    # episodes
    T: int = 500
    N: int = 2000
    L: int = 3
    n_initial: int = 5000
    n_eval: int = 2000
    barrier: str = "none"
    barrier_horizon: int = 500
    record_delta: bool = False
    checkpoint: str = ""
    delta_checkpoint: str = ""
    resume: bool = False
    variants: list = field(default_factory=lambda: ["none", "learned"])
    # scenario
    scenario: str = "head_on"
    separation: float = 600.0
    gap: float = 100.0
    # grid
    grid_n: int = 81
    grid_extent: float = 200.0
    # regressor
    hidden: list = field(default_factory=lambda: [128, 128])
    lr: float = 1e-4
    epochs: int = 2000
    batch_size: int = 256
    dropout: float = 0.5
    mc_samples: int = 50
    n_sigma: float = 3.0
    val_fraction: float = 0.2
    optimizer: str = "sgd"
    momentum: float = 0.0
    encode_angles: bool = True
    pair_features: bool = True
    # run
    seed: int = 0
    jobs: int = 1
    out: str = "runs"

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_mapping(cls, d: dict) -> "RunConfig":
        unknown = set(d) - cls.keys()
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        defaults = cls()
        kw = {}
        for k, v in d.items():
            kw[k] = _coerce(k, v, getattr(defaults, k))
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.dt > 0, "dt must be > 0")
        need(0 < self.v_min <= self.v_max, "need 0 < v_min <= v_max")
        need(self.omega_max_deg >= 0 and self.zeta_max >= 0, "omega_max_deg and zeta_max must be >= 0")
        need(len(self.omega_choices_deg) > 0, "omega_choices_deg is empty")
        need(all(abs(w) <= self.omega_max_deg for w in self.omega_choices_deg), "omega choice outside bounds")
        need(self.v_min <= self.v_fixed <= self.v_max, "v_fixed outside [v_min, v_max]")
        need(abs(self.zeta_fixed) <= self.zeta_max, "zeta_fixed outside bounds")
        need(len(self.sampler_lower) == 8 and len(self.sampler_upper) == 8, "sampler bounds need 8 entries")
        need(all(a <= b for a, b in zip(self.sampler_lower, self.sampler_upper)), "sampler_lower > sampler_upper")
        need(abs(self.swap_angle_deg) <= 180, "swap_angle_deg must lie in [-180, 180]")
        need(self.reach > 0, "reach must be > 0")
        need(self.ds > 0, "ds must be > 0")
        need(self.clip > 0, "clip must be > 0")
        need(0 <= self.lam <= 1, "lam must lie in [0, 1]")
        for k in ("T", "N", "L", "n_initial", "n_eval", "barrier_horizon", "grid_n", "jobs"):
            need(getattr(self, k) >= 1, f"{k} must be >= 1")
        need(self.barrier in BARRIER_KINDS, f"barrier must be one of {BARRIER_KINDS}")
        need(all(v in BARRIER_KINDS for v in self.variants) and self.variants, "bad variants list")
        need(self.grid_extent > 0, "grid_extent must be > 0")
        need(self.separation > 0 and self.gap >= 0, "separation must be > 0 and gap >= 0")
        need(all(h >= 1 for h in self.hidden), "hidden sizes must be >= 1")
        try:
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # -- derived objects -------------------------------------------------

    def params(self) -> PlantParams:
        return PlantParams(self.dt, self.v_min, self.v_max, math.radians(self.omega_max_deg), self.zeta_max)

    def omega_choices(self) -> list[float]:
        return [math.radians(w) for w in self.omega_choices_deg]

    def sampler(self) -> SamplerSpec:
        return SamplerSpec(tuple(self.sampler_lower), tuple(self.sampler_upper), self.seed)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(self.lr, self.epochs, self.batch_size, self.dropout, self.mc_samples, self.n_sigma,
                           self.val_fraction, tuple(self.hidden), self.optimizer, self.momentum,
                           self.seed if seed is None else seed)

    def nominal(self) -> WaypointPolicy:
        return WaypointPolicy(self.omega_choices(), self.v_fixed, self.zeta_fixed, self.params(),
                              swap_angle=math.radians(self.swap_angle_deg), reach=self.reach)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(key, value, default):
    """Match a file or flag value to the type of the field default."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            v = float(value)
            if not math.isfinite(v):
                raise ValueError(value)
            return v
        if isinstance(default, list):
            if isinstance(value, str):
                value = yaml.safe_load(value)
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            kind = type(default[0]) if default else float
            return [kind(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a flat mapping")
    return data


def resolve_config(args) -> RunConfig:
    d = load_config_file(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        d[k.strip()] = v
    for k in ("seed", "jobs", "out"):
        if getattr(args, k) is not None:
            d[k] = getattr(args, k)
    return RunConfig.from_mapping(d)


# -- outputs -------------------------------------------------------------


def write_meta(path: Path, cfg: RunConfig, command: str, **extra) -> None:
    meta = {"command": command, "config_hash": cfg.digest(), "seed": cfg.seed, "config": cfg.to_dict(), **extra}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in METRIC_COLUMNS])


def read_metrics(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"iteration": int(r["iteration"]), "val_mse": float(r["val_mse"]), "train_mse": float(r["train_mse"]),
             "overpred_pct": float(r["overpred_pct"]), "mean_target": float(r["mean_target"]),
             "unsafe_cells": int(r["unsafe_cells"])} for r in rows]


CHECKPOINT_RE = re.compile(r"iter_(\d{3,})\.json")


def checkpoint_name(i: int) -> str:
    return f"iter_{i:03d}.json"


def unsafe_cells(barrier, cfg: RunConfig) -> int:
    return sum(grid_unsafe_set(barrier, g).unsafe_count for g in _grids(cfg).values())


def _grids(cfg: RunConfig):
    e = cfg.grid_extent
    return default_grids(x_range=(-e, e), y_range=(-e, e), nx=cfg.grid_n, ny=cfg.grid_n)


def learned_from(cfg: RunConfig, path, plant) -> LearnedBarrier:
    if not path:
        raise ConfigError("a learned barrier needs 'checkpoint'")
    model = MLPRegressor.load(path)
    if cfg.delta_checkpoint:
        return LearnedBarrier(model, cfg.n_sigma, cfg.mc_samples, model_delta=MLPRegressor.load(cfg.delta_checkpoint),
                              action_set=cfg.nominal().action_set)
    return LearnedBarrier(model, cfg.n_sigma, cfg.mc_samples, plant=plant)


def build_barrier(kind: str, cfg: RunConfig, plant):
    if kind == "none":
        return None
    if kind == "learned":
        return learned_from(cfg, cfg.checkpoint, plant)
    return exact_barrier(kind, cfg.ds, cfg.clip, cfg.params(), cfg.barrier_horizon)


# -- commands ------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out: Path) -> Path:
    plant = FixedWingPlant(cfg.params())
    rho = SafetyFunction(cfg.ds, cfg.clip)
    nominal = cfg.nominal()
    h = build_barrier(cfg.barrier, cfg, plant)
    policy = nominal if h is None else FilteredPolicy(nominal, h, FilterConfig(nominal.action_set, cfg.lam))
    data = generate_dataset(plant, rho, policy, cfg.sampler(), cfg.N, cfg.T, record_delta=cfg.record_delta,
                            action_set=nominal.action_set, seed=cfg.seed, jobs=cfg.jobs)
    path = out / "dataset.csv"
    data.to_csv(path)
    write_meta(path, cfg, "generate", rows=len(data))
    return path


def cmd_train(cfg: RunConfig, out: Path) -> list[Path]:
    """Initial barrier fit to ``n_initial`` nominal episodes (``h0.json``).

    With ``record_delta`` the same episodes also train the one-step
    surrogate used by the fully model-free barrier (``delta.json``).
    """
    plant = FixedWingPlant(cfg.params())
    rho = SafetyFunction(cfg.ds, cfg.clip)
    sampler = cfg.sampler()
    nominal = cfg.nominal()
    actions = nominal.action_set
    encoder = encoder_for(sampler, plant, cfg.encode_angles, pair_features=cfg.pair_features)
    tcfg = cfg.train_config(derive_seed(cfg.seed, 0, 1))
    data = generate_dataset(plant, rho, nominal, sampler, cfg.n_initial, cfg.T, record_delta=cfg.record_delta,
                            action_set=actions, seed=derive_seed(cfg.seed, 0), jobs=cfg.jobs)
    y = clip_targets(data.rho_min, cfg.clip)
    model = fit_regressor(data.x0, y, tcfg, encoder, target_scale=cfg.clip)
    paths = [out / "h0.json"]
    model.save(paths[0])
    write_meta(paths[0], cfg, "train")
    barrier = LearnedBarrier(model, cfg.n_sigma, cfg.mc_samples, plant=plant)
    if cfg.record_delta:
        denc = encoder_for(sampler, plant, cfg.encode_angles, len(actions), pair_features=cfg.pair_features)
        g = fit_regressor(data.x0, clip_targets(data.rho_min_tail, cfg.clip), cfg.train_config(derive_seed(cfg.seed, 0, 2)),
                          denc, target_scale=cfg.clip, action_index=data.u_idx)
        paths.append(out / "delta.json")
        g.save(paths[1])
        write_meta(paths[1], cfg, "train")
    va = model.history["val_index"]
    write_metrics(out / "metrics_h0.csv", [{
        "iteration": 0, "val_mse": model.history["val_loss"][-1], "train_mse": model.history["train_loss"][-1],
        "overpred_pct": 100.0 * overprediction_rate(barrier, data.x0[va], y[va]) if len(va) else float("nan"),
        "mean_target": float(np.mean(y)), "unsafe_cells": unsafe_cells(barrier, cfg)}])
    return paths


def cmd_iterate(cfg: RunConfig, out: Path) -> list[Path]:
    plant = FixedWingPlant(cfg.params())
    rho = SafetyFunction(cfg.ds, cfg.clip)
    metrics_path = out / "metrics.csv"
    start, rows = 1, []
    src = cfg.checkpoint
    if cfg.resume:
        done = sorted(int(m[1]) for p in out.iterdir() if (m := CHECKPOINT_RE.fullmatch(p.name)))
        if done:
            start = done[-1] + 1
            src = str(out / checkpoint_name(done[-1]))
            rows = [r for r in read_metrics(metrics_path) if r["iteration"] < start]
    if not src:
        raise ConfigError("iterate needs 'checkpoint' (the initial barrier, e.g. from 'train')")
    paths = [out / checkpoint_name(i) for i in range(1, start)]
    if start > cfg.L:
        log.info("all %d iterations already present", cfg.L)
        return paths
    init = MLPRegressor.load(src)
    h0 = LearnedBarrier(init, cfg.n_sigma, cfg.mc_samples, plant=plant)

    def save(it):
        p = out / checkpoint_name(it.index)
        it.model.save(p)
        write_meta(p, cfg, "iterate", iteration=it.index)
        rows.append(it.metrics)
        write_metrics(metrics_path, rows)
        paths.append(p)

    iterate_expansion(h0, cfg.L - start + 1, rho, cfg.N, cfg.nominal(), cfg.T, plant, cfg.sampler(),
                      cfg.train_config(), lam=cfg.lam, clip=cfg.clip, seed=cfg.seed, jobs=cfg.jobs, init=init,
                      start=start, grid_metric=lambda b: unsafe_cells(b, cfg), on_iteration=save)
    write_meta(metrics_path, cfg, "iterate")
    return paths


def cmd_evaluate(cfg: RunConfig, out: Path) -> Path:
    plant = FixedWingPlant(cfg.params())
    variants = {name: build_barrier(name, cfg, plant) for name in cfg.variants}
    rows, _, idx, batches = evaluate_collision_rates(cfg.n_eval, variants, cfg.sampler(), cfg.T, cfg.ds, cfg.lam,
                                                 cfg.params(), seed=cfg.seed, jobs=cfg.jobs,
                                                 nominal=cfg.nominal())
    path = out / "rates.csv"
    write_rate_table(rows, path)
    for name, batch in batches.items():
        write_episode_summary(out / f"episodes_{name}.csv", idx, batch, cfg.ds)
    write_meta(path, cfg, "evaluate")
    return path


def cmd_grid(cfg: RunConfig, out: Path) -> list[Path]:
    plant = FixedWingPlant(cfg.params())
    h = build_barrier(cfg.barrier, cfg, plant)
    if h is None:
        raise ConfigError("grid needs a barrier other than 'none'")
    paths = []
    for name, spec in _grids(cfg).items():
        p = out / f"grid_{cfg.barrier}_{name}.csv"
        grid_unsafe_set(h, spec).to_csv(p)
        write_meta(p, cfg, "grid", heading=name)
        paths.append(p)
    return paths


def cmd_scenario(cfg: RunConfig, out: Path) -> Path:
    plant = FixedWingPlant(cfg.params())
    try:
        ep = scenario(cfg.scenario, cfg.separation, cfg.gap, T=cfg.T, barrier=cfg.barrier, lam=cfg.lam,
                      ds=cfg.ds, seed=cfg.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    res = run_episode(ep, plant, build_barrier(cfg.barrier, cfg, plant), omega_choices=cfg.omega_choices())
    path = out / "episode.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "barrier", "min_distance", "collided", "override_count", "infeasible_count"])
        w.writerow([cfg.scenario, cfg.barrier, repr(res.min_distance), int(res.collided), res.override_count,
                    res.infeasible_count])
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "x1", "y1", "theta1", "z1", "x2", "y2", "theta2", "z2"])
        for k, x in enumerate(res.trajectory):
            w.writerow([k, *(repr(float(v)) for v in x)])
    write_meta(path, cfg, "scenario")
    log.info("%s with %s: min distance %.2f m, %d overrides", cfg.scenario, cfg.barrier, res.min_distance,
             res.override_count)
    return path


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "iterate": cmd_iterate,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "scenario": cmd_scenario,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mfbf", description="Rollout and learned barrier functions for two-vehicle avoidance.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat JSON or YAML config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"mfbf: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"mfbf: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"mfbf: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in result if isinstance(result, list) else [result]:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
