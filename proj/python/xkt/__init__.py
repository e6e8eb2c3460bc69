"""Knowledge tracing with DKT2 and a DKT baseline.

Configs are plain dicts with the same keys as the ``xkt`` CLI JSON config;
missing keys take their defaults and unknown keys raise ``ConfigError``.
"""

import json

from . import _core
from ._core import ConfigError, ContractError, Dataset, Model, NumericError

__all__ = [
    "ConfigError",
    "ContractError",
    "Dataset",
    "Model",
    "NumericError",
    "compute_metrics",
    "config_hash",
    "evaluate",
    "gradcheck",
    "normalize_config",
    "predict",
    "prep",
    "run_cli",
    "synth",
    "train",
]


def _text(config):
    return json.dumps(config or {})


def normalize_config(config=None):
    """Full config with defaults filled in."""
    return json.loads(_core.normalize_config(_text(config)))


def config_hash(config=None):
    return _core.config_hash(_text(config))


def compute_metrics(scores, labels):
    """AUC, ACC, RMSE and count for one pool of predictions."""
    return json.loads(_core.compute_metrics(list(scores), list(labels)))


def synth(config=None):
    return json.loads(_core.synth(_text(config)))


def prep(config=None):
    return json.loads(_core.prep(_text(config)))


def train(config=None):
    return json.loads(_core.train(_text(config)))


def evaluate(config=None, dump=False):
    return json.loads(_core.evaluate(_text(config), dump))


def predict(config, input_csv):
    return json.loads(_core.predict(_text(config), str(input_csv)))


def gradcheck(config=None):
    return _core.gradcheck(_text(config))


def run_cli(*args):
    """Runs the CLI in-process; returns (exit_code, stdout, stderr)."""
    return _core.run_cli([str(a) for a in args])
