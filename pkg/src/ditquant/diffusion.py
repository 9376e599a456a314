"""Noise schedule, forward diffusion, and the deterministic reverse sampler.

The forward process corrupts x0 toward Gaussian noise under a beta
schedule; the reverse process runs a deterministic DDIM-style update (eta
= 0) over uniformly spaced timesteps, combining conditional and
unconditional noise predictions with classifier-free guidance.

Noise draws come from numpy's PCG64 generator (np.random.default_rng);
the algorithm name is recorded in report metadata so runs are
reproducible.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import as_tensor

PRNG_NAME = "pcg64"


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta schedule and its derived alpha / alpha-bar sequences (t = 1..T)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha-bar at integer timestep t, with alpha_bar(0) = 1."""
        if not 0 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside [0, {self.T}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


@dataclass(frozen=True)
class SamplerConfig:
    num_inference_steps: int = 50
    guidance_scale: float = 3.0
    eta: float = 0.0  # 0 = deterministic; stochastic sampling is out of scope

    def validate(self, sched: NoiseSchedule) -> None:
        if not 1 <= self.num_inference_steps <= sched.T:
            raise ConfigError(
                f"num_inference_steps {self.num_inference_steps} must be in [1, T={sched.T}]"
            )
        if self.guidance_scale < 0:
            raise ConfigError(f"guidance_scale must be >= 0, got {self.guidance_scale}")
        if self.eta != 0.0:
            raise ConfigError("only eta = 0 (deterministic) sampling is supported")


def linear_beta_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linearly spaced betas, endpoints inclusive, with derived products."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if not np.all(np.diff(alpha_bars) < 0) and T > 1:
        raise ConfigError("alpha_bar sequence is not strictly decreasing")
    return NoiseSchedule(T, betas, alphas, alpha_bars)


def forward_diffuse(
    x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """Closed-form corruption x_t = sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps."""
    x0 = as_tensor(x0)
    eps = as_tensor(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    if not 1 <= t <= sched.T:
        raise ConfigError(f"timestep {t} outside [1, {sched.T}]")
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_step(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Deterministic reverse update from timestep t to t_prev (eta = 0).

    Predicts x0 from the noise estimate, then re-noises to the target
    level: x0 = (x_t - sqrt(1-ab_t)*eps)/sqrt(ab_t);
    x_prev = sqrt(ab_prev)*x0 + sqrt(1-ab_prev)*eps.
    """
    x_t = as_tensor(x_t)
    eps_hat = as_tensor(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"x_t shape {x_t.shape} != eps_hat shape {eps_hat.shape}")
    if not (t > t_prev >= 0):
        raise ConfigError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0_pred = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_pred + np.sqrt(1.0 - ab_prev) * eps_hat


def cfg_combine(
    eps_uncond: np.ndarray, eps_cond: np.ndarray, w: float
) -> np.ndarray:
    """Classifier-free guidance: eps_uncond + w * (eps_cond - eps_uncond)."""
    eps_uncond = as_tensor(eps_uncond)
    eps_cond = as_tensor(eps_cond)
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(
            f"shape mismatch: {eps_uncond.shape} vs {eps_cond.shape}"
        )
    return eps_uncond + w * (eps_cond - eps_uncond)


def inference_timesteps(T: int, num_steps: int) -> list[int]:
    """Descending, uniformly spaced timesteps T..T/num_steps (then 0)."""
    ts = [int(round(T * (num_steps - i) / num_steps)) for i in range(num_steps)]
    if any(a <= b for a, b in zip(ts, ts[1:])) or ts[-1] < 1:
        raise ConfigError(
            f"cannot place {num_steps} distinct timesteps in [1, {T}]"
        )
    return ts


def sample(
    model,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    cond: int,
    seed: int,
    *,
    on_step_start=None,
    on_prediction=None,
) -> np.ndarray:
    """Generate one sample, deterministically for a given seed.

    Starts from seeded Gaussian x_T, then for each of the uniformly spaced
    descending timesteps evaluates the model twice (conditional and
    unconditional), combines with guidance, and applies the deterministic
    reverse update; the final step lands on t = 0.

    on_step_start(step_index, t) fires before the step's model
    evaluations; on_prediction(step_index, t, x_t, eps) fires after the
    guided prediction, before the state advances. Callbacks must not
    mutate their inputs.
    """
    cfg.validate(sched)
    model.check_label(cond)
    ts = inference_timesteps(sched.T, cfg.num_inference_steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(model.sample_shape)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        if on_step_start is not None:
            on_step_start(i, t)
        eps_cond = model.forward(x, t, cond)
        eps_uncond = model.forward(x, t, model.null_label)
        eps = cfg_combine(eps_uncond, eps_cond, cfg.guidance_scale)
        if on_prediction is not None:
            on_prediction(i, t, x, eps)
        x = ddim_step(x, eps, t, t_prev, sched)
    return x
