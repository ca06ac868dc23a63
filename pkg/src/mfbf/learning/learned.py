"""Barrier functions backed by trained regressors."""

from __future__ import annotations

import numpy as np

from ..barrier import BarrierFunction
from ..dynamics import ActionSet
from .mlp import MLPRegressor

_BLOCK = 8192


class _Conservative:
    """``mean - n_sigma * sigma`` over a frozen set of thinned networks."""

    def __init__(self, model: MLPRegressor, n_sigma: float, mc_samples: int, seed: int | None):
        if n_sigma < 0:
            raise ValueError("n_sigma must be >= 0")
        if mc_samples < 2:
            raise ValueError("mc_samples must be >= 2")
        self.model = model
        self.n_sigma = n_sigma
        self.mc_samples = mc_samples
        self.seed = model.seed if seed is None else seed
        self.nets = None if model.dropout == 0 else model.thinned_networks(mc_samples, self.seed)

    def mean_sigma(self, X, action_index=None):
        F = self.model.encoder.encode(X, action_index)
        if self.nets is None:
            return self.model.forward(F) * self.model.target_scale, np.zeros(len(F))
        means, sigmas = [], []
        for lo in range(0, len(F), _BLOCK):
            outs = self.model.mc_outputs(F[lo:lo + _BLOCK], self.nets)
            means.append(outs.mean(axis=0))
            sigmas.append(outs.std(axis=0, ddof=1))
        return np.concatenate(means), np.concatenate(sigmas)

    def __call__(self, X, action_index=None):
        mean, sigma = self.mean_sigma(X, action_index)
        if self.n_sigma == 0:
            return mean
        return mean - self.n_sigma * sigma


class LearnedBarrier(BarrierFunction):
    """Barrier whose value is a conservative regressor prediction.

    Two ways to look one step ahead:

    * hybrid (``plant`` given): ``next = value(plant.step(x, u))``;
    * model-free (``model_delta`` given): ``next`` is the conservative
      prediction of a surrogate trained on the post-first-step minimum of
      rho, so ``delta(x, u) = g(x, u) - value(x)`` with no plant access.
    """

    def __init__(self, model_h: MLPRegressor, n_sigma: float = 3.0, mc_samples: int = 50,
                 seed: int | None = None, plant=None, model_delta: MLPRegressor | None = None,
                 action_set: ActionSet | None = None):
        if (plant is None) == (model_delta is None):
            raise ValueError("give exactly one of plant (hybrid) or model_delta (model-free)")
        self.model_h = model_h
        self.state_dim = model_h.encoder.state_dim
        self.plant = plant
        self.model_delta = model_delta
        self.action_set = action_set
        self._h = _Conservative(model_h, n_sigma, mc_samples, seed)
        if plant is not None and plant.state_dim != self.state_dim:
            raise ValueError(f"plant state dim {plant.state_dim} != model state dim {self.state_dim}")
        if model_delta is not None:
            enc = model_delta.encoder
            if action_set is None:
                raise ValueError("model-free mode needs the action set the surrogate was trained on")
            if enc.state_dim != self.state_dim or enc.n_actions != len(action_set):
                raise ValueError("delta surrogate dimensions do not match")
            self._g = _Conservative(model_delta, n_sigma, mc_samples, seed)

    @property
    def n_sigma(self) -> float:
        return self._h.n_sigma

    @property
    def mode(self) -> str:
        return "hybrid" if self.plant is not None else "model-free"

    def value(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self._h(X.reshape(-1, self.state_dim)).reshape(X.shape[:-1])

    def mean_sigma(self, X):
        X = np.asarray(X, dtype=float)
        m, s = self._h.mean_sigma(X.reshape(-1, self.state_dim))
        return m.reshape(X.shape[:-1]), s.reshape(X.shape[:-1])

    def surrogate_next(self, X, action_index) -> np.ndarray:
        """Conservative Δ-surrogate output g(x, u) for paired rows."""
        return self._g(X, action_index)

    def _action_indices(self, actions) -> np.ndarray:
        A = actions.actions if isinstance(actions, ActionSet) else np.asarray(actions, dtype=float)
        idx = self.action_set.index_of(A)
        if np.any(idx < 0):
            raise ValueError("action not in the surrogate's action set")
        return idx

    def next_values(self, X, actions) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        lead = X.shape[:-1]
        flat = X.reshape(-1, self.state_dim)
        A = actions.actions if isinstance(actions, ActionSet) else np.asarray(actions, dtype=float)
        if self.plant is not None:
            Xr = np.repeat(flat, len(A), axis=0)
            Ur = np.tile(A, (len(flat), 1))
            return self.value(self.plant.step(Xr, Ur)).reshape(lead + (len(A),))
        idx = self._action_indices(A)
        Xr = np.repeat(flat, len(A), axis=0)
        ir = np.tile(idx, len(flat))
        return self._g(Xr, ir).reshape(lead + (len(A),))

    def next_value(self, X, U) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        U = np.asarray(U, dtype=float)
        if self.plant is not None:
            return self.value(self.plant.step(X, U))
        lead = np.broadcast_shapes(X.shape[:-1], U.shape[:-1])
        Xf = np.broadcast_to(X, lead + X.shape[-1:]).reshape(-1, self.state_dim)
        Uf = np.broadcast_to(U, lead + U.shape[-1:]).reshape(len(Xf), -1)
        return self._g(Xf, self._action_indices(Uf)).reshape(lead)


def learned_barrier(model_h: MLPRegressor, model_delta, n_sigma: float = 3.0, mc_samples: int = 50,
                    seed: int | None = None, action_set: ActionSet | None = None) -> LearnedBarrier:
    """Wrap trained models as a barrier.

    ``model_delta`` is either a Δ-surrogate regressor (fully model-free) or a
    plant with a ``step`` method (hybrid).
    """
    if isinstance(model_delta, MLPRegressor):
        return LearnedBarrier(model_h, n_sigma, mc_samples, seed, model_delta=model_delta, action_set=action_set)
    return LearnedBarrier(model_h, n_sigma, mc_samples, seed, plant=model_delta)
