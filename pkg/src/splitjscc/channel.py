"""Differentiable AWGN channel with an average power constraint."""

from __future__ import annotations

import logging
import math

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, make_result, make_rng

log = logging.getLogger(__name__)


def snr_to_sigma2(snr_db: float, power: float = 1.0) -> float:
    """Noise variance for ``snr_db = 10 log10(power / sigma2)``; +inf dB gives 0."""
    if snr_db == math.inf:
        return 0.0
    return power / 10 ** (snr_db / 10)


def capacity(snr_db: float, power: float = 1.0) -> float:
    """Shannon capacity of the real AWGN channel in bits per channel use."""
    if snr_db == math.inf:
        return math.inf
    return 0.5 * math.log2(1 + power / snr_to_sigma2(snr_db, power))


def digital_bits(snr_db: float, bandwidth: int) -> float:
    """Bits a capacity-achieving digital scheme could deliver over ``bandwidth`` symbols."""
    return capacity(snr_db) * bandwidth


def power_normalize(x: Tensor, power: float = 1.0, return_flags: bool = False):
    """Scale each row of ``x`` (N, B) so that mean(row**2) == power exactly.

    A 1-D input is treated as one row.  All-zero rows are passed through
    unchanged (the constraint holds vacuously); their positions are returned
    as a boolean flag array when ``return_flags`` is set.
    """
    if power <= 0:
        raise ValueError(f"power must be positive, got {power}")
    one_d = x.ndim == 1
    xd = x.data.reshape(1, -1) if one_d else x.data.reshape(x.shape[0], -1)
    b = xd.shape[1]
    if b < 1:
        raise DimensionError("power_normalize needs at least one symbol per row")
    sq = (xd * xd).sum(axis=1, keepdims=True)
    zero = sq[:, 0] == 0
    if zero.any():
        log.warning("power_normalize: %d all-zero row(s) left unscaled", int(zero.sum()))
    safe = np.where(zero[:, None], 1.0, sq)
    scale = np.where(zero[:, None], 1.0, np.sqrt(power * b / safe))
    out = (xd * scale).reshape(x.shape)

    def backward(g):
        gd = g.reshape(xd.shape)
        proj = (xd * gd).sum(axis=1, keepdims=True) / safe
        gx = np.where(zero[:, None], gd, scale * (gd - xd * proj))
        return (gx.reshape(x.shape),)

    y = make_result(out, (x,), backward)
    if return_flags:
        return y, (bool(zero[0]) if one_d else zero)
    return y


class Channel:
    """Interface for differentiable channels: ``channel(x) -> y`` with x, y of equal shape."""

    def transmit(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.transmit(x)


class AwgnChannel(Channel):
    """y = x + z with z ~ N(0, sigma2) i.i.d.; sigma2 = power / 10^(snr_db / 10).

    ``snr_db=math.inf`` gives a noiseless channel.  The noise is treated as a
    constant during backpropagation, so dy/dx is the identity.
    """

    def __init__(self, snr_db: float, power: float = 1.0, rng: np.random.Generator | None = None, seed: int = 0):
        self.snr_db = float(snr_db)
        self.power = float(power)
        self.rng = rng if rng is not None else make_rng(seed, "channel")

    @property
    def sigma2(self) -> float:
        return snr_to_sigma2(self.snr_db, self.power)

    def reseed(self, seed: int, stream: str = "eval_channel") -> None:
        self.rng = make_rng(seed, stream)

    def sample_noise(self, shape) -> np.ndarray:
        return self.rng.normal(0.0, math.sqrt(self.sigma2), size=shape)

    def transmit(self, x: Tensor) -> Tensor:
        if self.sigma2 == 0.0:
            return x
        z = self.sample_noise(x.shape)
        return make_result(x.data + z, (x,), lambda g: (g,))

    def __repr__(self):
        return f"AwgnChannel(snr_db={self.snr_db}, sigma2={self.sigma2:.6g})"
