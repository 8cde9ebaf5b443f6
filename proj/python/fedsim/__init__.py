"""Python bindings for the fedsim federated anomaly detection simulator."""

import json as _json

from ._fedsim import (
    CheckpointError,
    ConfigError,
    FedsimError,
    accept_update,
    accuracy,
    aggregate,
    auc_roc,
    calculate_relevance,
    compare,
    default_config,
    init_params,
    loss_and_grad,
    mann_whitney_u,
    normalize_config,
    optimal_interval,
    predict,
    replay,
    restore_checkpoint,
    run_experiment,
    run_to_dir,
    save_checkpoint,
    weibull_cdf,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "FedsimError",
    "accept_update",
    "accuracy",
    "aggregate",
    "auc_roc",
    "calculate_relevance",
    "compare",
    "config",
    "default_config",
    "init_params",
    "loss_and_grad",
    "mann_whitney_u",
    "normalize_config",
    "optimal_interval",
    "predict",
    "replay",
    "restore_checkpoint",
    "run",
    "run_experiment",
    "run_to_dir",
    "save_checkpoint",
    "weibull_cdf",
]


def config(base=None, **overrides):
    """Returns a validated config dict.

    ``base`` is a dict or JSON text; keyword overrides use ``__`` for nesting,
    e.g. ``clients__count=4``.
    """
    text = default_config() if base is None else (base if isinstance(base, str) else _json.dumps(base))
    assignments = [f"{k.replace('__', '.')}={_json.dumps(v)}" for k, v in overrides.items()]
    return _json.loads(normalize_config(text, assignments))


def run(cfg, workers=None):
    """Runs a config given as a dict or JSON text."""
    text = cfg if isinstance(cfg, str) else _json.dumps(cfg)
    return run_experiment(text, workers)
