"""Python bindings for the bicanet segmentation library.

Configs cross the boundary as dicts; images are numpy arrays shaped
(height, width, 3) in uint8 or (3, height, width) float32 in [0, 1].
"""

import json as _json

from . import _core
from ._core import (
    ConfigError,
    ConfusionMatrix,
    DataError,
    MetricError,
    ParseError,
    ShapeError,
    gradcheck,
    palette,
    poly_lr,
)

__all__ = [
    "ConfigError",
    "ConfusionMatrix",
    "DataError",
    "MetricError",
    "Model",
    "ParseError",
    "ShapeError",
    "Trainer",
    "default_config",
    "generate_sample",
    "gradcheck",
    "load_model",
    "palette",
    "poly_lr",
]


def default_config():
    """Every training setting with its default value."""
    return _json.loads(_core.default_config_json())


def generate_sample(index, **spec):
    """One synthetic sample as (image float32 (3, h, w), labels uint8 (h, w))."""
    return _core.generate_sample(_json.dumps(spec), index)


class Trainer(_core.Trainer):
    """Training run driven by a (partial) config dict."""

    def __init__(self, config=None, **overrides):
        merged = dict(config or {})
        merged.update(overrides)
        super().__init__(_json.dumps(merged))

    @property
    def config(self):
        return _json.loads(self.config_json)


class Model(_core.Model):
    @property
    def config(self):
        return _json.loads(self.config_json)


def load_model(path):
    """Rebuilds a frozen model from a checkpoint file."""
    return Model(str(path))
