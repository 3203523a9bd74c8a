"""Learnable residual classifier on top of the frozen backbone features."""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

__all__ = ["ResidualHead", "make_head"]

_KEYS = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True, eq=False)
class ResidualHead:
    """One-hidden-layer tanh net from features to class logits."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for k in _KEYS:
            a = np.array(getattr(self, k), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, k, a)

    @property
    def dim(self):
        return self.W1.shape[0]

    @property
    def n_classes(self):
        return self.W2.shape[1]

    def params(self):
        return {k: getattr(self, k) for k in _KEYS}

    def with_params(self, params):
        for k in _KEYS:
            if np.shape(params[k]) != getattr(self, k).shape:
                raise ShapeError(f"head parameter {k} has the wrong shape")
        return ResidualHead(*(params[k] for k in _KEYS))

    def logits(self, features):
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"head expects {self.dim}-d features, got {x.shape}")
        flat = x.reshape(-1, self.dim)
        out = _logits({k: ad.Var(v) for k, v in self.params().items()}, ad.Var(flat), "")
        return out.value.reshape(x.shape[:-1] + (self.n_classes,))

    def probs(self, features):
        z = self.logits(features)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


def make_head(dim, hidden=16, n_classes=2, seed=0):
    rng = np.random.default_rng([seed, 0x4EAD])
    return ResidualHead(
        rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, hidden)),
        np.zeros(hidden),
        np.zeros((hidden, n_classes)),
        np.zeros(n_classes),
    )


def _logits(P, x, prefix="res."):
    return ad.tanh_mlp(x, *(P[prefix + k] for k in _KEYS))
