"""
Attacks Module - Sinh mẫu đối kháng l∞ (FGSM, PGD)
Inner maximization of the adversarial-training objective.

All attacks run the model in inference mode and use sum-reduced
cross-entropy, so each sample's input gradient is its own.
"""
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

import config
from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import Model
from .seeding import make_rng


@dataclass(frozen=True)
class AttackConfig:
    """
    Threat-model parameters in model space ([0, 1] pixels).

    epsilon_step None means pgd_step_size(epsilon, n_iter).
    """
    epsilon: float
    epsilon_step: Optional[float] = None
    n_iter: int = config.N_PGD_TRAIN
    clip_min: float = config.CLIP_MIN
    clip_max: float = config.CLIP_MAX
    random_start: bool = config.TRAIN_RANDOM_START
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.epsilon_step is not None and self.epsilon_step < 0:
            raise ConfigurationError(f"epsilon_step must be >= 0, got {self.epsilon_step}")
        if self.n_iter < 1:
            raise ConfigurationError(f"n_iter must be >= 1, got {self.n_iter}")
        if not self.clip_min < self.clip_max:
            raise ConfigurationError(f"clip_min {self.clip_min} must be below clip_max {self.clip_max}")

    @classmethod
    def from_scale(cls, epsilon: float, scale: float = config.EPSILON_SCALE, **kwargs) -> "AttackConfig":
        """Build from an ε quoted on another scale (e.g. 8 on 0-255)"""
        return cls(epsilon=epsilon / scale, **kwargs)

    @property
    def step(self) -> float:
        return pgd_step_size(self.epsilon, self.n_iter) if self.epsilon_step is None else self.epsilon_step

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "epsilon_step": self.step,
            "n_iter": self.n_iter,
            "clip_min": self.clip_min,
            "clip_max": self.clip_max,
            "random_start": self.random_start,
            "seed": self.seed,
        }


def pgd_step_size(epsilon: float, n_iter: int) -> float:
    """ε_step = 1.5·ε / n"""
    if n_iter < 1:
        raise ConfigurationError(f"n_iter must be >= 1, got {n_iter}")
    return config.PGD_STEP_FACTOR * epsilon / n_iter


def project_linf(x_candidate: np.ndarray, x_origin: np.ndarray, epsilon: float,
                 clip_min: float = config.CLIP_MIN, clip_max: float = config.CLIP_MAX) -> np.ndarray:
    """
    Chiếu lên quả cầu l∞ quanh x_origin, sau đó cắt về miền dữ liệu

    Args:
        x_candidate: Điểm cần chiếu
        x_origin: Tâm quả cầu
        epsilon: Bán kính
        clip_min: Cận dưới của pixel
        clip_max: Cận trên của pixel

    Returns:
        Mảng mới đã chiếu
    """
    x_candidate = np.asarray(x_candidate, dtype=np.float64)
    x_origin = np.asarray(x_origin, dtype=np.float64)
    if x_candidate.shape != x_origin.shape:
        raise DimensionError(f"projection shape mismatch: {x_candidate.shape} vs {x_origin.shape}")
    delta = np.clip(x_candidate - x_origin, -epsilon, epsilon)
    return np.clip(x_origin + delta, clip_min, clip_max)


def input_gradient(model: Model, x: np.ndarray, y) -> np.ndarray:
    """∇ₓ of the sum-reduced cross-entropy, parameters held constant"""
    T.reset_tape()
    x_var = T.Tensor(x, requires_grad=True)
    loss = T.softmax_cross_entropy(model.forward(x_var, training=False, param_grads=False), y,
                                   reduction="sum")
    T.backward(loss)
    return x_var.grad


def _check_inputs(model: Model, x, y) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.spec.input_shape):
        raise DimensionError(f"attack input {x.shape} does not match N×{model.spec.input_shape}")
    if np.asarray(y).shape != (x.shape[0],):
        raise DimensionError(f"labels {np.asarray(y).shape} do not match batch of {x.shape[0]}")
    return x


def _signed_step(model: Model, x_current: np.ndarray, x_origin: np.ndarray, y,
                 step: float, cfg: AttackConfig) -> np.ndarray:
    # np.sign maps 0 to 0
    grad = input_gradient(model, x_current, y)
    return project_linf(x_current + step * np.sign(grad), x_origin, cfg.epsilon, cfg.clip_min, cfg.clip_max)


def fgsm(model: Model, x, y, cfg: AttackConfig) -> np.ndarray:
    """
    Single step of size ε along sign(∇ₓL), clipped to the data range.

    Returns:
        x_adv as a new array
    """
    x = _check_inputs(model, x, y)
    if cfg.epsilon == 0.0:
        return x.copy()
    return _signed_step(model, x, x, y, cfg.epsilon, cfg)


def random_start_noise(shape, epsilon: float, seed: int, sample_indices: Sequence[int]) -> np.ndarray:
    """Uniform noise in the ε-ball, one independent stream per sample index"""
    noise = np.empty(shape, dtype=np.float64)
    for row, index in enumerate(sample_indices):
        noise[row] = make_rng(seed, int(index)).uniform(-epsilon, epsilon, size=shape[1:])
    return noise


def pgd(model: Model, x, y, cfg: AttackConfig,
        sample_indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Projected gradient descent under the l∞ threat model.

    Iterates n_iter times: x ← Π(x + ε_step·sign(∇ₓL)). With random_start
    the first iterate is drawn uniformly in the ε-ball; noise for each row
    is seeded by (cfg.seed, sample_indices[row]) so results do not depend on
    how a dataset is batched.

    Args:
        model: Target model (evaluated in inference mode)
        x: Clean batch (N, C, H, W) within [clip_min, clip_max]
        y: True labels (N,)
        cfg: Attack configuration
        sample_indices: Global index of every row (default 0..N-1)

    Returns:
        x_adv with ‖x_adv − x‖∞ ≤ ε and values in [clip_min, clip_max]
    """
    x = _check_inputs(model, x, y)
    if sample_indices is None:
        sample_indices = np.arange(x.shape[0])
    step = cfg.step
    # Điểm xuất phát: ngẫu nhiên trong quả cầu hoặc chính x
    if cfg.random_start:
        noise = random_start_noise(x.shape, cfg.epsilon, cfg.seed, sample_indices)
        x_adv = project_linf(x + noise, x, cfg.epsilon, cfg.clip_min, cfg.clip_max)
    else:
        x_adv = x.copy()
    if cfg.epsilon == 0.0:
        return x_adv
    for _ in range(cfg.n_iter):
        x_adv = _signed_step(model, x_adv, x, y, step, cfg)
    return x_adv


def with_epsilon(cfg: AttackConfig, epsilon: float, epsilon_step: Optional[float] = None) -> AttackConfig:
    """Copy of cfg at a new budget; step recomputed unless given"""
    return replace(cfg, epsilon=epsilon, epsilon_step=epsilon_step)
