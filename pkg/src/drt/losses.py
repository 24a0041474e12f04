"""Source classification loss, alignment discrepancies and their combination."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor

PROB_FLOOR = 1e-12


class Alignment(str, enum.Enum):
    NONE = "None"
    MCD = "MCD"
    MOMENT = "Moment"


@dataclass
class LossConfig:
    lam: float = 50.0
    alignment: Alignment = Alignment.MCD
    mcd_inner_steps: int = 4

    def __post_init__(self):
        self.alignment = Alignment(self.alignment)
        if not self.lam >= 0:
            raise ConfigError("lambda must be >= 0")
        if self.alignment is Alignment.MCD and self.mcd_inner_steps < 1:
            raise ConfigError("mcd_inner_steps must be >= 1 for MCD alignment")


class Diagnostics:
    """Counts how often the probability floor was hit."""

    clamped = 0

    @classmethod
    def reset(cls):
        cls.clamped = 0


def cross_entropy(p: Tensor, y: Tensor) -> Tensor:
    """Mean negative log-likelihood of one-hot targets ``y`` under rows of ``p``.

    Probabilities are floored at ``PROB_FLOOR`` before the log; floor hits are
    counted in :class:`Diagnostics`.
    """
    if p.shape != y.shape or p.ndim != 2:
        raise DimensionError(f"cross_entropy: p {p.shape} and y {y.shape} must be matching [B,C]")
    hits = int(((p.data <= PROB_FLOOR) & (y.data > 0)).sum())
    if hits:
        Diagnostics.clamped += hits
    logp = T.log(T.clip_min(p, PROB_FLOOR))
    return T.scale(T.sum_(T.mul(y, logp)), -1.0 / p.shape[0])


def classifier_discrepancy(p1: Tensor, p2: Tensor) -> Tensor:
    """Mean absolute difference over all B*C entries; lies in [0, 2/C]."""
    if p1.shape != p2.shape:
        raise DimensionError(f"discrepancy: shapes {p1.shape} and {p2.shape} differ")
    return T.mean(T.abs_(T.sub(p1, p2)))


def moment_distance(fs: Tensor, ft: Tensor) -> Tensor:
    """Squared distance between feature means plus between (biased) variances."""
    if fs.ndim != 2 or ft.ndim != 2 or fs.shape[1] != ft.shape[1]:
        raise DimensionError(f"moment_distance: incompatible features {fs.shape} and {ft.shape}")
    if fs.shape[0] < 2 or ft.shape[0] < 2:
        raise DimensionError("moment_distance needs at least 2 samples per batch")

    def moments(f):
        mu = T.mean(f, axis=0, keepdims=True)
        var = T.mean(T.square(T.sub(f, mu)), axis=0)
        return T.reshape(mu, (-1,)), var

    ms, vs = moments(fs)
    mt, vt = moments(ft)
    return T.add(T.sum_(T.square(T.sub(ms, mt))), T.sum_(T.square(T.sub(vs, vt))))


def total_loss(lce, ld, lam: float):
    """``lce + lam * ld`` for tensors or plain floats."""
    if isinstance(lce, Tensor) or isinstance(ld, Tensor):
        lce_t = lce if isinstance(lce, Tensor) else Tensor(lce)
        ld_t = ld if isinstance(ld, Tensor) else Tensor(ld)
        return T.add(lce_t, T.scale(ld_t, lam))
    out = float(lce) + float(lam) * float(ld)
    if not np.isfinite(out):
        raise NumericError("total loss is not finite")
    return out


def one_hot(labels, classes: int) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return Tensor(out)
