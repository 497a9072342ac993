"""Python bindings for the sm3 core library."""

import json

from ._core import (
    ChecksumError,
    Error,
    FormatError,
    IoError,
    NonFiniteError,
    ShapeError,
    ValidationError,
    VersionError,
    auc,
    confusion_metrics,
    kmeans,
    l_mm,
    nt_xent,
    pair_match,
    run_cli,
)
from . import _core

__all__ = [
    "ChecksumError",
    "Error",
    "FormatError",
    "IoError",
    "NonFiniteError",
    "ShapeError",
    "ValidationError",
    "VersionError",
    "auc",
    "confusion_metrics",
    "generate",
    "kmeans",
    "l_mm",
    "nt_xent",
    "pair_match",
    "run_cli",
]


def generate(config=None, **overrides):
    """Synthetic paired dataset as a dict of numpy arrays and split index lists.

    ``config`` is a generator config dict; keyword arguments override its keys.
    """
    merged = dict(config or {})
    merged.update(overrides)
    out = _core.generate(json.dumps(merged))
    out["config"] = json.loads(out["config"])
    return out
