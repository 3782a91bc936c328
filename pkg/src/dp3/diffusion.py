"""Variance-preserving action diffusion: schedule, loss, DDPM and DDIM samplers.

Timesteps run ``1..K``; schedule arrays are indexed by ``k`` directly with a
leading ``k = 0`` entry (signal 1, noise 0) so ``signal_scale[k - 1]`` is always
defined. Samplers take any ``denoiser(a_k, k, condition) -> ndarray`` callable,
which lets closed-form oracle denoisers stand in for the network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import (
    ParamStore,
    ShapeError,
    Tensor,
    add_linear,
    concat,
    linear,
    mse,
    relu,
)

PREDICTION_MODES = ("sample", "epsilon")
SCHEDULE_KINDS = ("squared_cosine", "linear")

DenoiseFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    K: int
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    signal_scale: np.ndarray
    noise_scale: np.ndarray

    def check_k(self, k) -> np.ndarray:
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.K):
            raise ValueError(f"timestep out of range 1..{self.K}: {k}")
        return k


def make_schedule(K: int = 100, kind: str = "squared_cosine", beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if K < 1:
        raise ValueError("K must be at least 1")
    if kind == "squared_cosine":
        s = 0.008

        def alpha_bar(t):
            return math.cos((t + s) / (1.0 + s) * math.pi / 2.0) ** 2

        betas = np.array([min(1.0 - alpha_bar(k / K) / alpha_bar((k - 1) / K), 0.999) for k in range(1, K + 1)])
    elif kind == "linear":
        betas = np.linspace(beta_start, beta_end, K)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    signal = np.sqrt(np.cumprod(alphas))
    noise = np.sqrt(1.0 - signal**2)
    return NoiseSchedule(K, kind, betas, alphas, signal, noise)


def forward_diffuse(a0: np.ndarray, k, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``signal_scale[k] * a0 + noise_scale[k] * eps`` (``k`` scalar or per-row)."""
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} != data shape {a0.shape}")
    k = sched.check_k(k)
    s = _per_row(sched.signal_scale[k], a0)
    n = _per_row(sched.noise_scale[k], a0)
    return s * a0 + n * eps


def _per_row(coef: np.ndarray, like: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))


def timestep_embedding(k, dim: int = 32) -> np.ndarray:
    """Sinusoidal embedding; ``(B,)`` timesteps to ``(B, dim)``."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Denoiser:
    """Conditioned MLP on ``[flattened a_k ; timestep embedding ; condition]``.

    The output has the flattened action-sequence shape and is read as the clean
    sequence or the noise depending on the prediction mode.
    """

    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        action_shape: tuple[int, int],
        cond_dim: int,
        hidden: tuple[int, ...] = (256, 256),
        time_dim: int = 32,
        prefix: str = "denoiser",
    ) -> None:
        self.action_shape = tuple(action_shape)
        self.flat = int(np.prod(action_shape))
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.layers = []
        fan_in = self.flat + time_dim + cond_dim
        for i, width in enumerate(hidden):
            self.layers.append(add_linear(store, rng, f"{prefix}.fc{i}", fan_in, width))
            fan_in = width
        self.out = add_linear(store, rng, f"{prefix}.out", fan_in, self.flat)

    def forward(self, a_k, k, condition) -> Tensor:
        """Differentiable forward; ``a_k`` is ``(B, H, A)`` or ``(B, H*A)``."""
        a = np.asarray(a_k.data if isinstance(a_k, Tensor) else a_k, dtype=np.float64)
        b = a.shape[0]
        cond = condition if isinstance(condition, Tensor) else Tensor(condition)
        if cond.shape != (b, self.cond_dim):
            raise ShapeError(f"condition {cond.shape} != ({b}, {self.cond_dim})")
        temb = timestep_embedding(np.broadcast_to(np.asarray(k), (b,)), self.time_dim)
        x = concat([Tensor(a.reshape(b, self.flat)), Tensor(temb), cond], axis=-1)
        for W, bias in self.layers:
            x = relu(linear(x, W, bias))
        return linear(x, *self.out)

    def __call__(self, a_k: np.ndarray, k, condition: np.ndarray) -> np.ndarray:
        a_k = np.asarray(a_k, dtype=np.float64)
        return self.forward(a_k, k, condition).data.reshape(a_k.shape)


def training_loss(
    a0: np.ndarray,
    condition,
    denoiser,
    sched: NoiseSchedule,
    mode: str,
    rng: np.random.Generator,
) -> Tensor:
    """Diffusion behavior-cloning loss on a batch of clean sequences.

    Draws ``k ~ U{1..K}`` and ``eps ~ N(0, I)`` per item, noises ``a0`` and
    regresses the denoiser output onto ``eps`` (epsilon mode) or ``a0``
    (sample mode).

    Args:
        a0: ``(B, H, A)`` normalized clean action sequences.
        condition: ``(B, D)`` condition tensor; gradients flow into it.
        denoiser: object with ``forward(a_k, k, condition) -> Tensor``.
    """
    if mode not in PREDICTION_MODES:
        raise ValueError(f"prediction mode must be one of {PREDICTION_MODES}")
    a0 = np.asarray(a0, dtype=np.float64)
    if a0.shape[0] == 0:
        raise ValueError("empty batch")
    b = a0.shape[0]
    k = rng.integers(1, sched.K + 1, size=b)
    eps = rng.standard_normal(a0.shape)
    a_k = forward_diffuse(a0, k, eps, sched)
    pred = denoiser.forward(a_k, k, condition)
    target = eps if mode == "epsilon" else a0
    return mse(pred, Tensor(target.reshape(pred.shape)))


def predict_clean(
    a_k: np.ndarray,
    k: int,
    condition,
    denoiser: DenoiseFn,
    sched: NoiseSchedule,
    mode: str,
    clip: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Estimate ``a0`` from ``a_k``; returns ``(a0_hat, raw network output)``.

    The estimate is clipped to ``[-1, 1]`` unless ``clip`` is False.
    """
    if mode not in PREDICTION_MODES:
        raise ValueError(f"prediction mode must be one of {PREDICTION_MODES}")
    sched.check_k(k)
    out = np.asarray(denoiser(a_k, k, condition), dtype=np.float64)
    if mode == "sample":
        a0_hat = out
    else:
        a0_hat = (a_k - sched.noise_scale[k] * out) / sched.signal_scale[k]
    if clip:
        a0_hat = np.clip(a0_hat, -1.0, 1.0)
    return a0_hat, out


def inference_timesteps(K: int, n_steps: int) -> np.ndarray:
    """Evenly strided, strictly decreasing timesteps from ``K`` down to 1."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if n_steps > K:
        raise ValueError(f"n_steps={n_steps} exceeds K={K}")
    if n_steps == 1:
        return np.array([K])
    return np.rint(np.linspace(K, 1, n_steps)).astype(int)


def ddim_sample(
    denoiser: DenoiseFn,
    condition,
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    n_steps: int = 10,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
    mode: str = "sample",
    init_noise: np.ndarray | None = None,
) -> np.ndarray:
    """Deterministic (``eta=0``) or stochastic DDIM over a strided timestep subset.

    Args:
        shape: output shape, e.g. ``(B, H, A)``.
        init_noise: optional ``a^K``; drawn from ``rng`` when omitted.

    Returns:
        The final clean estimate, clipped to ``[-1, 1]``.
    """
    steps = inference_timesteps(sched.K, n_steps)
    if init_noise is None:
        if rng is None:
            raise ValueError("need rng or init_noise")
        init_noise = rng.standard_normal(shape)
    a = np.array(init_noise, dtype=np.float64).reshape(shape)
    a0_hat = a
    for i, k in enumerate(steps):
        k = int(k)
        a0_hat, _ = predict_clean(a, k, condition, denoiser, sched, mode)
        if i == len(steps) - 1:
            break
        kp = int(steps[i + 1])
        eps_hat = (a - sched.signal_scale[k] * a0_hat) / sched.noise_scale[k]
        var_k = sched.noise_scale[k] ** 2
        var_p = sched.noise_scale[kp] ** 2
        sigma = 0.0
        if eta > 0.0:
            ratio = (sched.signal_scale[k] / sched.signal_scale[kp]) ** 2
            sigma = eta * math.sqrt(var_p / var_k * (1.0 - ratio))
        dir_scale = math.sqrt(max(var_p - sigma**2, 0.0))
        a = sched.signal_scale[kp] * a0_hat + dir_scale * eps_hat
        if sigma > 0.0:
            if rng is None:
                raise ValueError("stochastic DDIM (eta > 0) needs rng")
            a = a + sigma * rng.standard_normal(a.shape)
    return np.clip(a0_hat, -1.0, 1.0)


def ddpm_coefficients(sched: NoiseSchedule, k: int) -> tuple[float, float, float]:
    """``(alpha_k, gamma_k, sigma_k)`` of ``a_{k-1} = alpha_k (a_k - gamma_k eps) + sigma_k z``."""
    sched.check_k(k)
    alpha = 1.0 / math.sqrt(sched.alphas[k])
    gamma = sched.betas[k] / sched.noise_scale[k]
    sigma = math.sqrt(posterior_variance(sched, k))
    return alpha, gamma, sigma


def posterior_variance(sched: NoiseSchedule, k: int) -> float:
    return float(sched.betas[k] * sched.noise_scale[k - 1] ** 2 / sched.noise_scale[k] ** 2)


def ddpm_step(
    a_k: np.ndarray,
    k: int,
    condition,
    denoiser: DenoiseFn,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    mode: str = "sample",
) -> np.ndarray:
    """One ancestral step: posterior mean given the clipped clean estimate, plus noise.

    No noise is added at ``k = 1``.
    """
    a0_hat, _ = predict_clean(a_k, k, condition, denoiser, sched, mode)
    s_prev = sched.signal_scale[k - 1]
    var_k = sched.noise_scale[k] ** 2
    coef_a0 = s_prev * sched.betas[k] / var_k
    coef_ak = math.sqrt(sched.alphas[k]) * sched.noise_scale[k - 1] ** 2 / var_k
    mean = coef_a0 * a0_hat + coef_ak * a_k
    if k == 1:
        return mean
    return mean + math.sqrt(posterior_variance(sched, k)) * rng.standard_normal(a_k.shape)


def ddpm_sample(
    denoiser: DenoiseFn,
    condition,
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    rng: np.random.Generator,
    mode: str = "sample",
) -> np.ndarray:
    """Full ``K``-step ancestral sampling from ``a^K ~ N(0, I)``."""
    a = rng.standard_normal(shape)
    for k in range(sched.K, 0, -1):
        a = ddpm_step(a, k, condition, denoiser, sched, rng, mode)
    return np.clip(a, -1.0, 1.0)
