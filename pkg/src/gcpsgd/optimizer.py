"""GCP-Adam: Adam over stochastic GCP gradients with epoch-level rollback.

Iterations are grouped into epochs of ``epoch_iters`` steps. After each
epoch the loss is re-estimated on a sample set drawn once up front. An
epoch that increases the estimate is undone (factors, moments, iteration
counter and estimate are restored), the learning rate is multiplied by
``decay``, and the run stops after more than ``max_bad_epochs`` failures.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .errors import FitError
from .losses import LossFunction
from .mttkrp import GradientSet
from .rng import make_rng
from .sampling import (
    SamplerKind,
    draw_estimator_samples,
    estimate_loss,
    stochastic_gradient,
)
from .tensor import DenseTensor, KruskalModel, SparseTensor, Tensor, check_compatible, norm

log = logging.getLogger(__name__)

AUTO = "auto"


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit_gcp_adam`.

    ``samples`` (the total gradient budget ``s``) defaults to the sum of the
    tensor extents. ``sampler`` defaults to stratified for sparse tensors and
    uniform for dense ones. ``lower_bound="auto"`` takes the loss's own
    bound (0 for the nonnegative losses). ``estimator_kind`` defaults to
    stratified when a stratified sampler is used and uniform otherwise.
    """

    rank: int
    loss: LossFunction = field(default_factory=lambda: LossFunction("gaussian"))
    sampler: Optional[str] = None
    samples: Optional[int] = None
    nonzero_samples: Optional[int] = None
    zero_samples: Optional[int] = None
    oversample: float = 1.1
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epoch_iters: int = 1000
    max_bad_epochs: int = 1
    decay: float = 0.1
    lower_bound: Union[float, None, str] = AUTO
    estimator_samples: int = 100_000
    estimator_kind: Optional[str] = None
    max_epochs: int = 100
    seed: int = 0
    threads: int = 1
    deterministic: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.epoch_iters < 1:
            raise ValueError("epoch_iters must be at least 1")
        if self.learning_rate <= 0 or self.epsilon < 0:
            raise ValueError("learning rate must be positive and epsilon nonnegative")
        if self.max_bad_epochs < 0 or self.max_epochs < 0:
            raise ValueError("epoch limits must be nonnegative")

    @property
    def bound(self) -> float | None:
        return self.loss.lower_bound if self.lower_bound == AUTO else self.lower_bound

    def resolve_sampler(self, x: Tensor) -> SamplerKind:
        name = self.sampler or ("stratified" if isinstance(x, SparseTensor) else "uniform")
        if name != "uniform" and not isinstance(x, SparseTensor):
            raise ValueError(f"{name} sampling requires a sparse tensor")
        s = self.samples if self.samples is not None else sum(x.shape.dims)
        if name == "uniform":
            return SamplerKind(name, samples=s, oversample=self.oversample)
        p = self.nonzero_samples if self.nonzero_samples is not None else s // 2
        q = self.zero_samples if self.zero_samples is not None else s - s // 2
        return SamplerKind(name, nonzeros=p, zeros=q, oversample=self.oversample)

    def resolve_estimator_kind(self, x: Tensor) -> str:
        if self.estimator_kind:
            return self.estimator_kind
        stratified = self.resolve_sampler(x).name != "uniform"
        return "stratified" if stratified else "uniform"


@dataclass(frozen=True, eq=False)
class AdamState:
    """First and second moments, iteration count, step size and bad-epoch count."""

    first: tuple[np.ndarray, ...]
    second: tuple[np.ndarray, ...]
    t: int = 0
    alpha: float = 0.01
    bad_epochs: int = 0

    @classmethod
    def zeros(cls, model: KruskalModel, alpha: float) -> "AdamState":
        z = tuple(np.zeros_like(a) for a in model.factors)
        return cls(z, tuple(np.zeros_like(a) for a in model.factors), 0, alpha, 0)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_estimate: float
    learning_rate: float
    seconds: float
    accepted: bool


@dataclass
class FitTrace:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def accepted_losses(self) -> list[float]:
        return [r.loss_estimate for r in self.records if r.accepted]


def adam_step(
    model: KruskalModel, state: AdamState, grads: GradientSet, cfg: FitConfig
) -> tuple[KruskalModel, AdamState]:
    """One Adam update of every factor matrix, followed by projection.

    Bias corrections use ``t + 1`` (``t`` counts completed iterations) and
    ``epsilon`` sits inside the square root. Returns new objects; the inputs
    are left untouched.
    """
    b1, b2 = cfg.beta1, cfg.beta2
    tt = state.t + 1
    c1, c2 = 1 - b1**tt, 1 - b2**tt
    lb = cfg.bound
    factors, first, second = [], [], []
    for a, b, c, g in zip(model.factors, state.first, state.second, grads):
        b = b1 * b + (1 - b1) * g
        c = b2 * c + (1 - b2) * g * g
        a = a - state.alpha * ((b / c1) / np.sqrt(c / c2 + cfg.epsilon))
        if lb is not None:
            a = np.maximum(a, lb)
        factors.append(a)
        first.append(b)
        second.append(c)
    return KruskalModel(tuple(factors)), replace(
        state, first=tuple(first), second=tuple(second), t=tt
    )


def initial_guess(x: Tensor, rank: int, rng) -> KruskalModel:
    """Uniform(0, 1) factors rescaled so the model norm matches ``||x||``."""
    factors = [rng.random((n, rank)) for n in x.shape.dims]
    model = KruskalModel(tuple(factors))
    target, current = norm(x), norm(model)
    if target > 0 and current > 0:
        scale = (target / current) ** (1.0 / model.ndim)
        model = KruskalModel(tuple(a * scale for a in factors))
    return model


def fit_gcp_adam(
    x: Tensor,
    cfg: FitConfig,
    rng: np.random.Generator | None = None,
    *,
    init: KruskalModel | None = None,
    loss_estimate: Callable[[KruskalModel], float] | None = None,
    callback: Callable[[KruskalModel, AdamState], None] | None = None,
    estimator=None,
) -> tuple[KruskalModel, FitTrace]:
    """Fit a rank-``cfg.rank`` GCP model with stochastic gradients and Adam.

    Parameters
    ----------
    x : SparseTensor or DenseTensor
    cfg : FitConfig
    rng : numpy Generator, optional
        Parent stream. When omitted, streams are derived from ``cfg.seed``
        with labels ``init``, ``estimator`` and ``gradient``.
    init : KruskalModel, optional
        Starting point in place of the random initial guess.
    loss_estimate : callable, optional
        Replaces the sampled loss estimate (the estimator is then not drawn).
    callback : callable, optional
        Called with ``(model, state)`` after every iteration.
    estimator : EstimatorSamples, optional
        Pre-drawn estimator samples, e.g. shared across several runs.

    Returns
    -------
    model : KruskalModel
        Model at the last accepted epoch.
    trace : FitTrace
        Epoch 0 holds the initial estimate; one record per epoch after that.
    """
    if not isinstance(x, (SparseTensor, DenseTensor)):
        raise TypeError("x must be a SparseTensor or DenseTensor")
    if x.shape.total == 0 or (isinstance(x, SparseTensor) and x.nnz == 0 and x.num_zeros == 0):
        raise ValueError("empty tensor")
    cfg.loss.check_data(x.values)
    sampler = cfg.resolve_sampler(x)
    if rng is None:
        init_rng = make_rng(cfg.seed, "init")
        est_rng = make_rng(cfg.seed, "estimator")
        grad_rng = make_rng(cfg.seed, "gradient")
    else:
        init_rng, est_rng, grad_rng = rng.spawn(3)

    model = init if init is not None else initial_guess(x, cfg.rank, init_rng)
    check_compatible(x.shape, model)
    if model.rank != cfg.rank:
        raise ValueError(f"initial model has rank {model.rank}, expected {cfg.rank}")

    if loss_estimate is None:
        if estimator is None:
            estimator = _draw_estimator(x, cfg, est_rng)

        def loss_estimate(mdl):
            return estimate_loss(x, mdl, cfg.loss, estimator)

    state = AdamState.zeros(model, cfg.learning_rate)
    start = time.perf_counter()
    f_hat = _checked(loss_estimate(model), 0)
    trace = FitTrace([EpochRecord(0, f_hat, state.alpha, 0.0, True)])
    log.info("epoch %d  f=%.6g  alpha=%.3g", 0, f_hat, state.alpha)

    epoch = 0
    while state.bad_epochs <= cfg.max_bad_epochs and epoch < cfg.max_epochs:
        epoch += 1
        saved_model, saved_state, f_old = model, state, f_hat
        for _ in range(cfg.epoch_iters):
            grads = stochastic_gradient(
                sampler, x, model, cfg.loss, grad_rng, cfg.threads, cfg.deterministic
            )
            model, state = adam_step(model, state, grads, cfg)
            if callback is not None:
                callback(model, state)
        f_hat = _checked(loss_estimate(model), epoch)
        accepted = not f_hat > f_old
        if not accepted:
            model, f_hat = saved_model, f_old
            state = replace(
                saved_state,
                t=state.t - cfg.epoch_iters,
                alpha=state.alpha * cfg.decay,
                bad_epochs=state.bad_epochs + 1,
            )
        elapsed = time.perf_counter() - start
        trace.append(EpochRecord(epoch, f_hat, state.alpha, elapsed, accepted))
        log.info(
            "epoch %d  f=%.6g  alpha=%.3g  %.2fs%s",
            epoch, f_hat, state.alpha, elapsed, "" if accepted else "  (rolled back)",
        )
    return model, trace


def _checked(value: float, epoch: int) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise FitError(f"loss estimate became non-finite ({value}) after epoch {epoch}")
    return value


def _draw_estimator(x: Tensor, cfg: FitConfig, rng):
    kind = cfg.resolve_estimator_kind(x)
    count = cfg.estimator_samples
    if kind != "stratified":
        return draw_estimator_samples(x, kind, count, rng, cfg.oversample)
    p, q = count // 2, count - count // 2
    if q > x.num_zeros:
        # rejection sampling refuses more zeros than the stratum holds
        log.warning("estimator zero budget %d capped at %d", q, x.num_zeros)
        q = x.num_zeros
    return draw_estimator_samples(x, kind, p + q, rng, cfg.oversample, split=(p, q))
