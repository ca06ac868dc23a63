"""Rollout-based and learned discrete-time barrier functions.

Modules: ``dynamics`` (plants and action sets), ``barrier`` (rollout
barriers and the discrete safety filter), ``learning`` (datasets, MC-dropout
regressors, safe-set expansion), ``sim`` (episodes, scenarios, grids) and
``cli``.
"""

__version__ = "0.1.0"
