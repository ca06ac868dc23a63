"""Feed-forward ReLU regressor with dropout, trained by minibatch gradient descent.

Uncertainty comes from Monte-Carlo dropout: ``mc_samples`` thinned networks
are drawn from a seed and every input is pushed through all of them. Since
the thinned networks are shared across the batch, the resulting mean and
standard deviation are deterministic functions of the input for a fixed
seed, which is what a barrier needs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mfbf-mlp/1"


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and uncertainty settings.

    Defaults are desk-scale; ``full_scale()`` gives 4 x 1024 hidden units
    and 10000 epochs.
    """

    lr: float = 1e-4
    epochs: int = 2000
    batch_size: int = 256
    dropout: float = 0.5
    mc_samples: int = 50
    n_sigma: float = 3.0
    val_fraction: float = 0.2
    hidden: tuple[int, ...] = (128, 128)
    optimizer: str = "sgd"
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mc_samples < 2:
            raise ValueError("mc_samples must be >= 2")
        if self.n_sigma < 0:
            raise ValueError("n_sigma must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        kw = {"hidden": (1024,) * 4, "epochs": 10000, **kw}
        return cls(**kw)


@dataclass(frozen=True)
class InputEncoder:
    """Affine map of each state dimension onto [-1, 1] using sampler bounds.

    Headings listed in ``angle_indices`` additionally contribute a
    ``(cos, sin)`` pair. ``pair_features`` (two-vehicle states only) appends
    the inter-vehicle range and each heading relative to the line of sight,
    which are invariant to translating or rotating the pair. With
    ``n_actions > 0`` a one-hot action index is appended. Degenerate bounds
    (lower == upper) use unit scale.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    angle_indices: tuple[int, ...] = ()
    encode_angles: bool = True
    n_actions: int = 0
    pair_features: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "angle_indices", tuple(int(i) for i in self.angle_indices))
        if len(self.lower) != len(self.upper):
            raise ValueError("bounds length mismatch")
        if self.pair_features and len(self.lower) != 8:
            raise ValueError("pair features need the 8-dimensional two-vehicle state")

    @property
    def state_dim(self) -> int:
        return len(self.lower)

    @property
    def n_features(self) -> int:
        n = self.state_dim + self.n_actions
        if self.encode_angles:
            n += 2 * len(self.angle_indices)
        if self.pair_features:
            n += 5
        return n

    def _center_scale(self):
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        scale = (hi - lo) / 2
        return (hi + lo) / 2, np.where(scale > 0, scale, 1.0)

    def normalize(self, X) -> np.ndarray:
        c, s = self._center_scale()
        return (np.asarray(X, dtype=float) - c) / s

    def denormalize(self, Z) -> np.ndarray:
        c, s = self._center_scale()
        return np.asarray(Z, dtype=float) * s + c

    def encode(self, X, action_index=None) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.state_dim)
        parts = [self.normalize(X)]
        if self.encode_angles and self.angle_indices:
            th = X[:, list(self.angle_indices)]
            parts += [np.cos(th), np.sin(th)]
        if self.pair_features:
            parts.append(self._pair(X))
        if self.n_actions:
            if action_index is None:
                raise ValueError("this encoder needs action indices")
            a = np.asarray(action_index, dtype=int).reshape(-1)
            if np.any((a < 0) | (a >= self.n_actions)):
                raise ValueError(f"action index outside [0, {self.n_actions})")
            parts.append(np.eye(self.n_actions)[np.broadcast_to(a, len(X))])
        return np.concatenate(parts, axis=1)

    def _pair(self, X):
        dx, dy = X[:, 4] - X[:, 0], X[:, 5] - X[:, 1]
        span = self.upper[0] - self.lower[0]
        span = span if span > 0 else 1.0
        bearing = np.arctan2(dy, dx)
        a1, a2 = X[:, 2] - bearing, X[:, 6] - bearing
        rng = np.hypot(dx, dy) / (span / 2) - 1.0
        return np.stack([rng, np.cos(a1), np.sin(a1), np.cos(a2), np.sin(a2)], axis=1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MLPRegressor:
    """Scalar regressor ``x -> target`` over encoded inputs.

    Targets are divided by ``target_scale`` for training; every public
    prediction is in target units.
    """

    encoder: InputEncoder
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.5
    target_scale: float = 1.0
    seed: int = 0
    history: dict = field(default_factory=dict, repr=False, compare=False)

    activation = "relu"

    @classmethod
    def init(cls, encoder: InputEncoder, hidden: Sequence[int], dropout: float, target_scale: float = 1.0,
             seed: int = 0) -> "MLPRegressor":
        rng = np.random.default_rng(seed)
        sizes = [encoder.n_features, *hidden, 1]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(encoder, weights, biases, dropout, target_scale, seed)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MLPRegressor":
        return MLPRegressor(self.encoder, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                            self.dropout, self.target_scale, self.seed)

    # -- inference --------------------------------------------------------

    def forward(self, F: np.ndarray) -> np.ndarray:
        """Dropout-off output in scaled units for encoded features F."""
        a = F
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ W + b, 0.0)
        return (a @ self.weights[-1] + self.biases[-1])[:, 0]

    def predict(self, X, action_index=None) -> np.ndarray:
        """Deterministic prediction with dropout disabled."""
        return self.forward(self.encoder.encode(X, action_index)) * self.target_scale

    def thinned_networks(self, mc_samples: int, seed: int) -> list[tuple[list[np.ndarray], list[np.ndarray]]]:
        """Draw ``mc_samples`` dropout masks and fold each into sub-matrices.

        Dropped units are removed outright and the inverted-dropout scale is
        folded into the following layer, so evaluating a thinned network
        costs roughly ``(1 - p)^2`` of a dense pass.
        """
        rng = np.random.default_rng(seed)
        keep = 1.0 - self.dropout
        nets = []
        for _ in range(mc_samples):
            Ws, bs = [], []
            prev = np.arange(self.weights[0].shape[0])
            for li, (W, b) in enumerate(zip(self.weights, self.biases)):
                last = li == len(self.weights) - 1
                cur = np.arange(W.shape[1]) if last else np.flatnonzero(rng.random(W.shape[1]) < keep)
                scale = 1.0 if li == 0 else 1.0 / keep
                Ws.append(np.ascontiguousarray(W[np.ix_(prev, cur)] * scale, dtype=np.float32))
                bs.append(b[cur].astype(np.float32))
                prev = cur
            nets.append((Ws, bs))
        return nets

    def mc_outputs(self, F: np.ndarray, nets) -> np.ndarray:
        """Outputs of each thinned network, shape (len(nets), rows), target units."""
        F32 = np.asarray(F, dtype=np.float32)
        out = np.empty((len(nets), len(F32)))
        for i, (Ws, bs) in enumerate(nets):
            a = F32
            for W, b in zip(Ws[:-1], bs[:-1]):
                a = a @ W
                a += b
                np.maximum(a, 0.0, out=a)
            out[i] = (a @ Ws[-1] + bs[-1])[:, 0]
        return out * self.target_scale

    def predict_with_uncertainty(self, X, mc_samples: int = 50, seed: int | None = None,
                                 action_index=None) -> tuple[np.ndarray, np.ndarray]:
        return predict_with_uncertainty(self, X, mc_samples, seed, action_index)

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "layer_sizes": self.layer_sizes,
            "activation": self.activation,
            "dropout": self.dropout,
            "target_scale": self.target_scale,
            "seed": self.seed,
            "encoder": self.encoder.to_dict(),
            "weights": [w.ravel(order="C").tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPRegressor":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
        sizes = d["layer_sizes"]
        weights = [np.asarray(w, dtype=float).reshape(a, b) for w, a, b in zip(d["weights"], sizes[:-1], sizes[1:])]
        biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        enc = d["encoder"]
        encoder = InputEncoder(tuple(enc["lower"]), tuple(enc["upper"]), tuple(enc["angle_indices"]),
                               bool(enc["encode_angles"]), int(enc["n_actions"]),
                               bool(enc.get("pair_features", False)))
        return cls(encoder, weights, biases, float(d["dropout"]), float(d["target_scale"]), int(d["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "MLPRegressor":
        return cls.from_dict(json.loads(Path(path).read_text()))


def predict_with_uncertainty(model: MLPRegressor, X, mc_samples: int = 50, seed: int | None = None,
                             action_index=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sample standard deviation over MC-dropout passes.

    With zero dropout every pass is identical, so the dropout-off output and
    ``sigma = 0`` are returned exactly.
    """
    if mc_samples < 2:
        raise ValueError("mc_samples must be >= 2")
    F = model.encoder.encode(X, action_index)
    if model.dropout == 0:
        return model.forward(F) * model.target_scale, np.zeros(len(F))
    nets = model.thinned_networks(mc_samples, model.seed if seed is None else seed)
    outs = model.mc_outputs(F, nets)
    return outs.mean(axis=0), outs.std(axis=0, ddof=1)


# ---------------------------------------------------------------------------
# training


def _backprop(model: MLPRegressor, F, y, rng, dropout):
    """Loss and gradients of 0.5 * mean squared error with inverted dropout."""
    acts, masks = [F], []
    a = F
    keep = 1.0 - dropout
    for W, b in zip(model.weights[:-1], model.biases[:-1]):
        a = np.maximum(a @ W + b, 0.0)
        if dropout > 0:
            m = (rng.random(a.shape) < keep) / keep
            a = a * m
        else:
            m = None
        masks.append(m)
        acts.append(a)
    pred = (a @ model.weights[-1] + model.biases[-1])[:, 0]
    err = pred - y
    n = len(y)
    g = (err / n)[:, None]
    gW, gb = [None] * len(model.weights), [None] * len(model.weights)
    for li in range(len(model.weights) - 1, -1, -1):
        gW[li] = acts[li].T @ g
        gb[li] = g.sum(axis=0)
        if li > 0:
            g = g @ model.weights[li].T
            if masks[li - 1] is not None:
                g = g * masks[li - 1]
            # where the mask is nonzero, acts > 0 iff the ReLU was active
            g = g * (acts[li] > 0)
    return float(np.mean(err * err)), gW, gb


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params] if cfg.optimizer == "adam" else None

    def step(self, params, grads):
        cfg = self.cfg
        self.t += 1
        if cfg.optimizer == "sgd":
            for p, g, m in zip(params, grads, self.m):
                if cfg.momentum:
                    m *= cfg.momentum
                    m += g
                    g = m
                p -= cfg.lr * g
            return
        b1, b2, eps = 0.9, 0.999, 1e-8
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + eps)


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split; at least one training row."""
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_val = min(int(round(n * val_fraction)), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_regressor(X, y, cfg: TrainConfig, encoder: InputEncoder, target_scale: float = 1.0,
                  action_index=None, init: MLPRegressor | None = None) -> MLPRegressor:
    """Fit an MLP to ``(X, y)`` by minibatch descent on the MSE.

    ``init`` warm-starts from an existing model with the same architecture.
    The returned model carries ``history`` with per-epoch ``train_loss``
    and ``val_loss`` (MSE in target units) plus the validation indices.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(X) < 2 or len(X) != len(y):
        raise ValueError("need at least 2 samples with matching targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training data")
    F = encoder.encode(X, action_index)
    ys = y / target_scale
    tr, va = split_indices(len(X), cfg.val_fraction, cfg.seed)
    if init is not None:
        model = init.copy()
        if model.layer_sizes[0] != F.shape[1]:
            raise ValueError("warm-start model does not match the encoder")
        model.encoder, model.target_scale, model.dropout = encoder, target_scale, cfg.dropout
        model.seed = cfg.seed
    else:
        model = MLPRegressor.init(encoder, cfg.hidden, cfg.dropout, target_scale, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 11])
    params = model.weights + model.biases
    opt = _Optimizer(cfg, params)
    train_loss, val_loss = [], []
    Ftr, ytr = F[tr], ys[tr]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(tr))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            b = order[lo:lo + cfg.batch_size]
            loss, gW, gb = _backprop(model, Ftr[b], ytr[b], rng, cfg.dropout)
            opt.step(params, gW + gb)
            total += loss * len(b)
        train_loss.append(total / len(tr) * target_scale ** 2)
        if len(va):
            r = model.forward(F[va]) - ys[va]
            val_loss.append(float(np.mean(r * r)) * target_scale ** 2)
        else:
            val_loss.append(float("nan"))
        if epoch % 500 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d train %.4g val %.4g", epoch, train_loss[-1], val_loss[-1])
    model.history = {"train_loss": train_loss, "val_loss": val_loss, "val_index": va, "train_index": tr}
    return model
