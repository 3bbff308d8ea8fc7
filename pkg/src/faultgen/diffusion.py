"""Forward noising, noise schedules, and the reverse generation process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Normalizer, TimeSeries
from .errors import ContractError, SamplingError


@dataclass
class NoiseSchedule:
    """Per-step variance tables for the diffusion chain."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ContractError("beta values must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ContractError("alpha_bar must be strictly decreasing")


def make_schedule(T: int, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build the beta/alpha tables. posterior_var[t] = beta_t * (1 - abar_{t-1}) / (1 - abar_t)."""
    if T < 2:
        raise ContractError("schedule needs T >= 2")
    if not (0 < beta_start <= beta_end < 1):
        raise ContractError("need 0 < beta_start <= beta_end < 1")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        # squared-cosine cumulative signal level; beta_start/beta_end act as clip bounds
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * np.pi / 2.0) ** 2
        abar = f / f[0]
        beta = np.clip(1.0 - abar[1:] / abar[:-1], beta_start, min(beta_end, 0.999))
    else:
        raise ContractError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - prev) / (1.0 - alpha_bar)
    return NoiseSchedule(T, beta, alpha, alpha_bar, posterior_var, kind)


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ContractError(f"x0/eps shape mismatch: {x0.shape} vs {eps.shape}")
    if not 0 <= t < sched.T:
        raise ContractError(f"t={t} outside [0, {sched.T})")
    ab = sched.alpha_bar[t]
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def reverse_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, z: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One denoising step: posterior mean from predicted noise plus scaled z."""
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    z = np.asarray(z)
    if not 0 <= t < sched.T:
        raise ContractError(f"t={t} outside [0, {sched.T})")
    if t == 0 and np.any(z != 0):
        raise ContractError("z must be zero at t = 0")
    mu = (x_t - sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) / np.sqrt(sched.alpha[t])
    return (mu + np.sqrt(sched.posterior_var[t]) * z).astype(x_t.dtype)


def sample(
    model,
    sched: NoiseSchedule,
    n: int,
    shape: tuple[int, int],
    seed: int,
    normalizer: Normalizer | None = None,
    channel_names: list[str] | None = None,
    clip_x0: float | None = 4.0,
) -> list[TimeSeries]:
    """Generate `n` series by iterating reverse_step from pure noise.

    Per-sample noise streams are seeded `seed + index`, so a sample's
    trajectory does not depend on how many siblings are generated with it.
    `model` must expose predict_noise(x, t) -> array of x's shape.

    `clip_x0` bounds the per-step implied clean signal to +-clip_x0 (in the
    normalized domain) by correcting the predicted noise before the reverse
    step; this keeps rare off-manifold trajectories from running away at
    desk scale while leaving the reverse-step formula untouched. Pass None
    for the unclamped chain.
    """
    if n == 0:
        return []
    tau, d = shape
    names = channel_names or [f"ch{c}" for c in range(d)]
    rngs = [np.random.default_rng(seed + i) for i in range(n)]
    x = np.stack([r.standard_normal(shape) for r in rngs]).astype(np.float32)
    for t in reversed(range(sched.T)):
        eps_hat = model.predict_noise(x, t)
        if clip_x0 is not None:
            root_ab = np.sqrt(sched.alpha_bar[t])
            root_1mab = np.sqrt(1.0 - sched.alpha_bar[t])
            x0_hat = (x - root_1mab * eps_hat) / root_ab
            x0_hat = np.clip(x0_hat, -clip_x0, clip_x0)
            eps_hat = (x - root_ab * x0_hat) / root_1mab
        if t > 0:
            z = np.stack([r.standard_normal(shape) for r in rngs]).astype(np.float32)
        else:
            z = np.zeros_like(x)
        x = reverse_step(x, t, eps_hat.astype(np.float32), z, sched)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite sample state at step t={t}")
    out = []
    for i in range(n):
        ts = TimeSeries(x[i], list(names))
        if normalizer is not None:
            ts = normalizer.invert(ts)
        out.append(ts)
    return out
