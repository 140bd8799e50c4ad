"""Dilated gated convolution models for DNA sequences."""

import json as _json

from . import _convnova
from ._convnova import (
    Error,
    auroc,
    dilation_schedule,
    f1_binary,
    hash_file,
    mcc,
    mcc_binary,
    one_hot,
    plan_dilation,
    synth,
)

__all__ = [
    "Error", "Model", "auroc", "bench", "dilation_schedule", "evaluate", "f1_binary", "finetune",
    "hash_file", "mcc", "mcc_binary", "one_hot", "param_count", "plan_dilation", "pretrain",
    "receptive_field", "synth",
]


def _dump(config):
    return config if isinstance(config, str) else _json.dumps(config or {})


class Model:
    """Double-precision model; `config` is a dict of model settings."""

    def __init__(self, config=None, seed=0, init_std=0.02, _handle=None):
        self._m = _handle if _handle is not None else _convnova.Model(_dump(config), seed, init_std)

    @classmethod
    def load(cls, path):
        return cls(_handle=_convnova.Model.load(str(path)))

    def save(self, path):
        self._m.save(str(path))

    @property
    def config(self):
        return _json.loads(self._m.config)

    @property
    def n_params(self):
        return self._m.n_params

    def features(self, sequence):
        return self._m.features(sequence)

    def logits(self, sequence):
        return self._m.logits(sequence)

    def receptive_field_empirical(self, length, seed=0):
        return self._m.receptive_field_empirical(length, seed)


def param_count(config):
    return _convnova.param_count(_dump(config))


def receptive_field(config):
    return _convnova.receptive_field(_dump(config))


def pretrain(config, data, out_dir):
    """Returns (epoch_losses, step_losses)."""
    return _convnova.pretrain(_dump(config), str(data), str(out_dir))


def finetune(config, data, out_dir, valid=None, checkpoint=None, metrics=("mcc", "f1", "top1", "auroc")):
    """Returns (best_epoch, report)."""
    return _convnova.finetune(_dump(config), str(data), str(out_dir),
                              None if valid is None else str(valid),
                              None if checkpoint is None else str(checkpoint), list(metrics))


def evaluate(checkpoint, data, out, metrics=("mcc", "f1", "top1", "auroc"), workers=1):
    return _convnova.evaluate(str(checkpoint), str(data), str(out), list(metrics), workers)


def bench(config, lengths, repeats, out, seed=0):
    return _convnova.bench(_dump(config), list(lengths), repeats, str(out), seed)
