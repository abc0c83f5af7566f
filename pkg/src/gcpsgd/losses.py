"""Elementwise GCP losses ``f(x, m)`` and their derivatives ``g = df/dm``.

All functions are vectorized over numpy arrays. A small shift ``eps`` is
added to ``m`` inside logarithms and denominators only, so that models
projected onto ``m >= 0`` never produce infinities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

KINDS = ("gaussian", "poisson", "bernoulli-odds", "gamma", "beta-half", "huber")
DEFAULT_EPS = 1e-10
DEFAULT_HUBER_DELTA = 0.25

_NONNEGATIVE_KINDS = {"poisson", "bernoulli-odds", "gamma", "beta-half"}


@dataclass(frozen=True)
class LossFunction:
    """An elementwise loss with its feasibility metadata.

    Parameters
    ----------
    kind : str
        One of ``gaussian``, ``poisson``, ``bernoulli-odds``, ``gamma``,
        ``beta-half`` (beta-divergence with beta = 1/2) or ``huber``.
    delta : float
        Huber threshold; ignored by other kinds.
    eps : float
        Shift applied to ``m`` inside logs and denominators.
    """

    kind: str
    delta: float = DEFAULT_HUBER_DELTA
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "huber" and not self.delta > 0:
            raise ValueError("huber threshold must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")

    @property
    def lower_bound(self) -> float | None:
        return 0.0 if self.kind in _NONNEGATIVE_KINDS else None

    @property
    def token(self) -> str:
        return f"huber:{self.delta:g}" if self.kind == "huber" else self.kind

    def check_data(self, x) -> None:
        """Raise :class:`DomainError` if any data value is outside the loss domain."""
        x = np.asarray(x, dtype=np.float64)
        if not np.isfinite(x).all():
            raise DomainError("data contains non-finite values")
        if self.kind == "bernoulli-odds":
            bad = (x != 0) & (x != 1)
            if bad.any():
                raise DomainError(
                    f"bernoulli-odds loss needs binary data; found value {x[bad].flat[0]:g}"
                )
        elif self.kind in _NONNEGATIVE_KINDS and (x < 0).any():
            raise DomainError(f"{self.kind} loss needs nonnegative data; found {x.min():g}")

    def value(self, x, m):
        """Elementwise ``f(x, m)`` without domain checks."""
        x = np.asarray(x, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        ms = m + self.eps
        if self.kind == "gaussian":
            return (x - m) ** 2
        if self.kind == "poisson":
            return m - x * np.log(ms)
        if self.kind == "bernoulli-odds":
            return np.log(m + 1 + self.eps) - x * np.log(ms)
        if self.kind == "gamma":
            return x / ms + np.log(ms)
        if self.kind == "beta-half":
            return 2 * np.sqrt(np.maximum(m, 0)) + 2 * x / np.sqrt(ms)
        r = np.abs(x - m)
        return np.where(r <= self.delta, r**2, 2 * self.delta * r - self.delta**2)

    def grad(self, x, m):
        """Elementwise ``df/dm`` without domain checks."""
        x = np.asarray(x, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        ms = m + self.eps
        if self.kind == "gaussian":
            return 2 * (m - x)
        if self.kind == "poisson":
            return 1 - x / ms
        if self.kind == "bernoulli-odds":
            return 1 / (m + 1 + self.eps) - x / ms
        if self.kind == "gamma":
            return 1 / ms - x / ms**2
        if self.kind == "beta-half":
            return 1 / np.sqrt(ms) - x / ms**1.5
        r = m - x
        return np.where(np.abs(r) <= self.delta, 2 * r, 2 * self.delta * np.sign(r))


def parse_loss(token: str) -> LossFunction:
    """Build a loss from a CLI token such as ``poisson`` or ``huber:0.5``."""
    name, _, arg = token.strip().partition(":")
    if name == "huber":
        return LossFunction("huber", delta=float(arg) if arg else DEFAULT_HUBER_DELTA)
    if arg:
        raise ValueError(f"loss {name!r} takes no parameter")
    if name == "beta-divergence":
        raise ValueError("only beta = 1/2 is supported; use 'beta-half'")
    return LossFunction(name)


def loss_value(loss: LossFunction, x, m):
    """Checked ``f(x, m)``: raises :class:`DomainError` for out-of-domain ``x``."""
    loss.check_data(x)
    out = loss.value(x, m)
    return float(out) if np.ndim(out) == 0 else out


def loss_grad(loss: LossFunction, x, m):
    """Checked ``df/dm``: raises :class:`DomainError` for out-of-domain ``x``."""
    loss.check_data(x)
    out = loss.grad(x, m)
    return float(out) if np.ndim(out) == 0 else out
