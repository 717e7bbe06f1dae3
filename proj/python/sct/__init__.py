"""Python bindings for the spine context transformer core."""

import json

from . import _core
from ._core import (
    ConfigError,
    DimensionError,
    FormatError,
    LoadError,
    ValidationError,
    attribute,
    balanced_accuracy,
    evaluate,
    gradcheck,
    level_names,
    roc_auc,
    synth,
    train,
)


class Model(_core.Model):
    """Model built from a config dict (missing keys take their defaults)."""

    def __init__(self, config=None, seed=0):
        super().__init__(json.dumps(config or {}), seed)

    @property
    def config(self):
        return json.loads(self.config_json)


def derive_labels(annotation, levels):
    return _core.derive_labels(json.dumps(annotation), list(levels))


__all__ = [
    "ConfigError",
    "DimensionError",
    "FormatError",
    "LoadError",
    "Model",
    "ValidationError",
    "attribute",
    "balanced_accuracy",
    "derive_labels",
    "evaluate",
    "gradcheck",
    "level_names",
    "roc_auc",
    "synth",
    "train",
]
