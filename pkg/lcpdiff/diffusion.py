"""
Forward noising process and the deterministic DDIM update.
"""
from typing import Any

import numpy as np

from .annotations import timestep
from .config import ScheduleConfig
from .tensor import Tensor, as_array
from .utils import InputError, ShapeError


class NoiseSchedule:
    def __init__(self, betas: np.ndarray) -> None:
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise InputError('betas must be a non-empty sequence')
        if not (0.0 < betas[0] and betas[-1] < 1.0 and np.all(np.diff(betas) >= 0)):
            raise InputError('betas must be non-decreasing inside (0, 1)')

        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def T(self) -> int:
        return self.betas.size

    def alpha_bar(self, t: timestep) -> float:
        """alpha_bar at `t`; index -1 is the clean endpoint with alpha_bar = 1"""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise InputError('Timestep %s outside schedule of %s steps' % (t, self.T))
        return float(self.alpha_bars[t])

    def timesteps(self, steps: int) -> list[timestep]:
        """Descending DDIM timesteps from T - 1 down to 0"""
        if steps < 1:
            raise InputError('DDIM needs at least one step')
        ts = np.unique(np.round(np.linspace(self.T - 1, 0, min(steps, self.T))).astype(int))[::-1]
        return [int(t) for t in ts]

    def eval(self) -> dict[str, Any]:
        return {
            'steps': self.T,
            'beta_start': float(self.betas[0]),
            'beta_end': float(self.betas[-1])
        }


def make_schedule(T: int, beta1: float, betaT: float) -> NoiseSchedule:
    if T < 1:
        raise InputError('Schedule needs T >= 1')
    if not 0.0 < beta1 <= betaT < 1.0:
        raise InputError('Schedule needs 0 < beta1 <= betaT < 1, got %s, %s' % (beta1, betaT))
    return NoiseSchedule(np.linspace(beta1, betaT, T))


def schedule_from_config(config: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(config.steps, config.beta_start, config.beta_end)


def add_noise(z0: Tensor, t: timestep, eps: Tensor, s: NoiseSchedule) -> Tensor:
    z0, eps = as_array(z0), as_array(eps)
    if z0.shape != eps.shape:
        raise ShapeError('Noise shape %s does not match latent %s' % (list(eps.shape), list(z0.shape)))
    ab = s.alpha_bar(t)
    return Tensor.wrap(np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps)


def predict_z0(z_t: Tensor, eps_pred: Tensor, t: timestep, s: NoiseSchedule) -> Tensor:
    ab = s.alpha_bar(t)
    return Tensor.wrap((as_array(z_t) - np.sqrt(1.0 - ab) * as_array(eps_pred)) / np.sqrt(ab))


def ddim_step(z_t: Tensor, eps_pred: Tensor, t: timestep, t_prev: timestep, s: NoiseSchedule) -> Tensor:
    """Deterministic DDIM update from `t` to `t_prev` (-1 is the clean image)"""
    if not -1 <= t_prev <= t < s.T or t < 0:
        raise InputError('DDIM needs -1 <= t_prev <= t < T, got t=%s t_prev=%s' % (t, t_prev))
    if t_prev == t:
        return z_t if isinstance(z_t, Tensor) else Tensor.wrap(as_array(z_t))

    eps = as_array(eps_pred)
    z0 = predict_z0(z_t, eps_pred, t, s).array
    ab_prev = s.alpha_bar(t_prev)
    return Tensor.wrap(np.sqrt(ab_prev) * z0 + np.sqrt(1.0 - ab_prev) * eps)


def guided_eps(eps_cond: Tensor, eps_uncond: Tensor, scale: float) -> Tensor:
    """Classifier-free guidance: eps_uncond + scale * (eps_cond - eps_uncond)"""
    if scale == 1.0:
        return eps_cond
    cond, uncond = as_array(eps_cond), as_array(eps_uncond)
    return Tensor.wrap(uncond + scale * (cond - uncond))


def timestep_embedding(t: timestep, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding [1 x dim] of a scalar timestep"""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t * freqs
    out = np.concatenate([np.cos(args), np.sin(args)])
    if dim % 2:
        out = np.concatenate([out, [0.0]])
    return out.reshape(1, dim)


def image_to_latent(image: 'Tensor | np.ndarray') -> Tensor:
    """[0, 1] pixels to the [-1, 1] range the denoiser works in"""
    return Tensor.wrap(as_array(image) * 2.0 - 1.0)


def latent_to_image(z: 'Tensor | np.ndarray') -> np.ndarray:
    return np.clip((as_array(z) + 1.0) / 2.0, 0.0, 1.0)
