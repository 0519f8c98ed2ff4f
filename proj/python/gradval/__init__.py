"""Python bindings for the gradval experiment library."""

import json

from . import _core
from ._core import Model, bh_fdr, gini, pr_auc, spearman, stage_names, topk_overlap, wilcoxon

__version__ = _core.version()


def default_config():
    return json.loads(_core.default_config_json())


def validate_config(config):
    _core.validate_config_json(json.dumps(config))


def config_hash(config):
    return _core.config_hash_json(json.dumps(config))


def run_full(config, out_dir, stages=()):
    """Runs the given stages (all when empty) and returns the manifest as a dict."""
    return json.loads(_core.run_full_json(json.dumps(config), str(out_dir), list(stages)))


def model(kind="desk", seed=1, lat=47.4, lon=8.6, variable="t2m", depth=3, grid=None):
    return _core.model(kind, seed, lat, lon, variable, depth, json.dumps(grid) if grid else "")


def synth_fields(seed, n, climatology_draws=200, grid=None):
    """Returns (fields[n, var, lat, lon], climatology[var, lat, lon])."""
    return _core.synth_fields(seed, n, climatology_draws, json.dumps(grid) if grid else "")


__all__ = [
    "Model",
    "bh_fdr",
    "config_hash",
    "default_config",
    "gini",
    "model",
    "pr_auc",
    "run_full",
    "spearman",
    "stage_names",
    "synth_fields",
    "topk_overlap",
    "validate_config",
    "wilcoxon",
]
