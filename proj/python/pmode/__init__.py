"""Board detection, segmentation and metric size estimation."""

import json
import os

from ._pmode import (
    Error,
    IoError,
    Model,
    PreconditionError,
    SchemaError,
    ShapeError,
    coefficient_of_variation,
    corner_clusters,
    corner_loss,
    dimension_text,
    evaluate,
    generate,
    hnw_loss,
    infer,
)
from ._pmode import train_json as _train_json


def train(config, base=None):
    """Train from a config dict or a path to a JSON config. Returns a summary dict."""
    if isinstance(config, (str, os.PathLike)):
        path = os.fspath(config)
        with open(path, encoding="utf-8") as f:
            text = f.read()
        return _train_json(text, os.path.dirname(os.path.abspath(path)))
    return _train_json(json.dumps(config), os.fspath(base) if base is not None else "")


__all__ = [
    "Error",
    "IoError",
    "Model",
    "PreconditionError",
    "SchemaError",
    "ShapeError",
    "coefficient_of_variation",
    "corner_clusters",
    "corner_loss",
    "dimension_text",
    "evaluate",
    "generate",
    "hnw_loss",
    "infer",
    "train",
]
