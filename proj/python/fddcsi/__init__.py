"""Downlink CSI prediction from uplink CSI with pooled, fine-tuned and meta-learned networks."""

import csv
import io
import json

from . import _core
from ._core import FormatError, Model, gradcheck, nmse, width_probe

__all__ = [
    "FormatError",
    "Model",
    "adapt",
    "config",
    "generate_dataset",
    "gradcheck",
    "load_model",
    "nmse",
    "sweep",
    "train_models",
    "width_probe",
]


def _text(cfg):
    return cfg if isinstance(cfg, str) else json.dumps(cfg)


def config(profile="desk", **overrides):
    """Full experiment config of a profile as a dict.

    Overrides are nested dicts in the same layout, e.g. ``train={"G_Ad": 10}``.
    """
    return json.loads(_core.config_json(profile, json.dumps(overrides) if overrides else ""))


def generate_dataset(cfg, env_id, role, n):
    return _core.generate_dataset(_text(cfg), env_id, role, n)


def train_models(cfg):
    """Returns (no_transfer, meta) models."""
    return _core.train_models(_text(cfg))


def adapt(model, x, y, cfg, rule="auto"):
    return _core.adapt(model, x, y, _text(cfg), rule)


def sweep(cfg, variable="none", grid=()):
    """Three-way comparison; one dict per CSV row."""
    report = _core.sweep(_text(cfg), variable, list(grid))
    rows = list(csv.DictReader(io.StringIO(report)))
    for r in rows:
        for key in ("sweep_value", "nmse_linear", "nmse_db"):
            r[key] = float(r[key])
        for key in ("k_targets", "seed"):
            r[key] = int(r[key])
    return rows


def load_model(path):
    return Model.load(str(path))
