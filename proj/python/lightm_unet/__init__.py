"""Python access to the lightm_unet native core."""

import json

from . import _core
from ._core import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    Error,
    LoadError,
    NumericError,
    ParameterError,
    argmax_classes,
    dice_ce_loss,
    dsc,
    init_scan_params,
    selective_scan,
    synth_sample,
)

__all__ = [
    "ConfigError", "ContractError", "DataError", "DimensionError", "Error", "LoadError", "NumericError",
    "ParameterError", "argmax_classes", "config", "count_flops", "count_params", "dice_ce_loss", "dsc",
    "forward", "init_scan_params", "run_cli", "selective_scan", "synth_sample",
]


def config(rank=3, **overrides):
    """Network configuration for `rank` with keyword overrides applied, as a dict."""
    return json.loads(_core.resolve_config(json.dumps(overrides), rank))


def _text(cfg):
    return json.dumps(cfg), int(cfg["rank"])


def count_params(cfg):
    return _core.count_params(*_text(cfg))


def count_flops(cfg, spatial):
    return _core.count_flops(*_text(cfg), list(spatial))


def forward(cfg, image, seed=0):
    """Logits (num_classes, spatial...) from freshly initialized weights."""
    return _core.forward(*_text(cfg), seed, image)


def run_cli(*args):
    """Runs the command line in-process; returns (exit_code, stdout, stderr)."""
    return _core.run_cli([str(a) for a in args])
