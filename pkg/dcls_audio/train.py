"""
Losses, batch augmentation, optimizers, the learning-rate schedule and drop
path. The loop that strings these together lives in ``pipeline``.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from dcls_audio import config

if TYPE_CHECKING:
    from dcls_audio.model import Parameter

logger = logging.getLogger(__name__)

ADAMW = "adamw"
LAMB = "lamb"
OPTIMIZERS = (ADAMW, LAMB)


class TrainingError(Exception):
    """Custom exception for training configuration and numerical failures."""
    pass


@dataclass(frozen=True)
class TrainConfig:
    """
    Training recipe. Defaults are the AudioSet recipe except ``batch_size``
    and ``clip_seconds``, which are desk-scale.
    """

    base_lr: float = 4e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    epochs: int = 60
    warmup_epochs: int = 20
    batch_size: int = 32
    mixup_alpha: float = 0.8
    label_smoothing: float = 0.1
    drop_path: float = 0.4
    optimizer: str = ADAMW
    pos_lr_mult: float = 1.0
    sig_lr_mult: float = 1.0
    grad_clip: Optional[float] = None
    clip_seconds: float = 10.0
    augment: bool = True
    seed: int = config.DEFAULT_SEED
    threads: int = config.DEFAULT_THREADS

    def validate(self) -> "TrainConfig":
        """
        Raises:
            TrainingError: If a field is out of range
        """
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise TrainingError("epochs and warmup_epochs must be non-negative")
        if self.warmup_epochs > self.epochs:
            raise TrainingError(f"warmup_epochs ({self.warmup_epochs}) must not exceed epochs ({self.epochs})")
        if self.base_lr <= 0 or self.pos_lr_mult <= 0 or self.sig_lr_mult <= 0:
            raise TrainingError("learning rate and lr multipliers must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise TrainingError("betas must be in [0, 1) and eps positive")
        if self.weight_decay < 0 or self.mixup_alpha < 0:
            raise TrainingError("weight_decay and mixup_alpha must be non-negative")
        if not 0 <= self.label_smoothing < 1 or not 0 <= self.drop_path < 1:
            raise TrainingError("label_smoothing and drop_path must be in [0, 1)")
        if self.batch_size < 1 or self.threads < 1 or self.clip_seconds <= 0:
            raise TrainingError("batch_size, threads and clip_seconds must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise TrainingError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise TrainingError("grad_clip must be positive when set")
        return self

    def with_overrides(self, values: Dict[str, object]) -> "TrainConfig":
        """Apply string or typed overrides; ``None`` values are ignored."""
        merged = config.merge_settings(asdict(self), None, values)
        return replace(self, **{key: _coerce(key, value) for key, value in merged.items()}).validate()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "TrainConfig":
        return cls().with_overrides(config.load_key_value_file(path))

    def to_text(self) -> str:
        return "".join(f"{key}={value}\n" for key, value in asdict(self).items())


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, value: object) -> object:
    if not isinstance(value, str):
        return value
    kind = _FIELD_TYPES[key]
    text = value.strip()
    try:
        if kind in (bool, "bool"):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if "Optional" in str(kind):
            return None if text.lower() in ("", "none") else float(text)
    except ValueError as e:
        raise TrainingError(f"invalid value {value!r} for {key}") from e
    return text


# ---------------------------------------------------------------------------
# Loss and batch augmentation
# ---------------------------------------------------------------------------

def bce_multilabel(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean binary cross-entropy over all N*C entries, in the stable logit form
    ``max(z, 0) - z*t + log1p(exp(-|z|))``.

    Returns:
        Tuple[float, np.ndarray]: (loss, gradient with respect to the logits)

    Raises:
        TrainingError: If shapes differ
    """
    if logits.shape != targets.shape:
        raise TrainingError(f"logits shape {logits.shape} does not match targets {targets.shape}")
    z = logits.astype(np.float64)
    t = targets.astype(np.float64)
    loss = np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z))))
    grad = (expit(z) - t) / z.size
    return float(loss), grad.astype(logits.dtype)


def label_smooth(targets: np.ndarray, eps: float = 0.1) -> np.ndarray:
    """Symmetric smoothing for binary targets: t * (1 - eps) + eps / 2."""
    return targets * (1.0 - eps) + eps / 2.0


def mixup_with(
    batch_x: np.ndarray, batch_y: np.ndarray, lam: float, partner: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Mix every item with ``batch[partner[i]]`` using coefficient ``lam``."""
    mixed_x = lam * batch_x + (1.0 - lam) * batch_x[partner]
    mixed_y = lam * batch_y + (1.0 - lam) * batch_y[partner]
    return mixed_x.astype(batch_x.dtype), mixed_y.astype(batch_y.dtype)


def mixup(
    batch_x: np.ndarray, batch_y: np.ndarray, alpha: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mixup with lambda ~ Beta(alpha, alpha) and a uniformly drawn partner per
    item (a random permutation of the batch, no class weighting).
    """
    if alpha <= 0:
        return batch_x, batch_y
    lam = float(rng.beta(alpha, alpha))
    partner = rng.permutation(batch_x.shape[0])
    return mixup_with(batch_x, batch_y, lam, partner)


# ---------------------------------------------------------------------------
# Drop path
# ---------------------------------------------------------------------------

def drop_path_mask(batch: int, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Per-sample scale: 0 with probability ``rate``, else 1 / (1 - rate)."""
    keep = 1.0 - rate
    return ((rng.random(batch) < keep) / keep).astype(dtype)


def drop_path(x: np.ndarray, rate: float, mode: str, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Stochastic depth on a residual branch; identity in eval mode or at rate 0."""
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise TrainingError("drop_path in train mode needs an rng")
    scale = drop_path_mask(x.shape[0], rate, rng, x.dtype)
    return x * scale.reshape((-1,) + (1,) * (x.ndim - 1))


def drop_path_rates(total_blocks: int, rate: float) -> List[float]:
    """Rates ramped linearly from 0 at the first block to ``rate`` at the last."""
    return [float(r) for r in np.linspace(0.0, rate, total_blocks)]


# ---------------------------------------------------------------------------
# Optimizers and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """First/second moments per parameter (by position in the parameter list)."""

    step: int = 0
    exp_avg: List[np.ndarray] = field(default_factory=list)
    exp_avg_sq: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, params: Sequence["Parameter"]) -> "OptimState":
        return cls(
            step=0,
            exp_avg=[np.zeros_like(p.value, dtype=np.float64) for p in params],
            exp_avg_sq=[np.zeros_like(p.value, dtype=np.float64) for p in params],
        )


def _lr_multiplier(param: "Parameter", cfg: TrainConfig) -> float:
    if param.group == "position":
        return cfg.pos_lr_mult
    if param.group == "sigma":
        return cfg.sig_lr_mult
    return 1.0


def _adam_direction(index: int, grad: np.ndarray, state: OptimState, cfg: TrainConfig) -> np.ndarray:
    m = state.exp_avg[index]
    v = state.exp_avg_sq[index]
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1 ** state.step)
    v_hat = v / (1.0 - cfg.beta2 ** state.step)
    return m_hat / (np.sqrt(v_hat) + cfg.eps)


def _check_state(params: Sequence["Parameter"], state: OptimState) -> None:
    if len(state.exp_avg) != len(params):
        raise TrainingError(f"optimizer state tracks {len(state.exp_avg)} tensors, got {len(params)} parameters")


def _project(param: "Parameter") -> None:
    if param.bound is not None:
        np.clip(param.value, -param.bound, param.bound, out=param.value)


def adamw_step(params: Sequence["Parameter"], state: OptimState, lr: float, cfg: TrainConfig) -> OptimState:
    """
    One AdamW step over ``params`` using their accumulated ``grad``.

    Weight decay is decoupled (``w -= lr * wd * w``) and only applied to the
    "weight" group. Positions and sigmas use ``lr`` times their multiplier,
    and bounded parameters are clipped after the update.
    """
    _check_state(params, state)
    state.step += 1
    for index, param in enumerate(params):
        step_lr = lr * _lr_multiplier(param, cfg)
        grad = param.grad.astype(np.float64)
        if param.group == "weight" and cfg.weight_decay:
            param.value -= (step_lr * cfg.weight_decay * param.value).astype(param.value.dtype)
        direction = _adam_direction(index, grad, state, cfg)
        param.value -= (step_lr * direction).astype(param.value.dtype)
        _project(param)
    return state


def lamb_step(params: Sequence["Parameter"], state: OptimState, lr: float, cfg: TrainConfig) -> OptimState:
    """
    One LAMB step: the Adam direction plus decay, scaled per tensor by the
    trust ratio ``||w|| / ||update||`` (1 when either norm is 0).
    """
    _check_state(params, state)
    state.step += 1
    for index, param in enumerate(params):
        step_lr = lr * _lr_multiplier(param, cfg)
        weight = param.value.astype(np.float64)
        update = _adam_direction(index, param.grad.astype(np.float64), state, cfg)
        if param.group == "weight" and cfg.weight_decay:
            update = update + cfg.weight_decay * weight
        w_norm = float(np.linalg.norm(weight))
        u_norm = float(np.linalg.norm(update))
        trust = w_norm / u_norm if w_norm > 0 and u_norm > 0 else 1.0
        param.value -= (step_lr * trust * update).astype(param.value.dtype)
        _project(param)
    return state


def optimizer_step(params: Sequence["Parameter"], state: OptimState, lr: float, cfg: TrainConfig) -> OptimState:
    step = lamb_step if cfg.optimizer == LAMB else adamw_step
    return step(params, state, lr, cfg)


def clip_grad_norm(params: Sequence["Parameter"], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if total > max_norm:
        logger.debug("clipping gradient norm %.4g to %.4g", total, max_norm)
        for param in params:
            param.grad *= max_norm / total
    return total


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then a half-cycle cosine down to 0."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    decay_steps = max(1, total_steps - warmup_steps)
    progress = min(max((step - warmup_steps) / decay_steps, 0.0), 1.0)
    return max(0.0, 0.5 * base_lr * (1.0 + math.cos(math.pi * progress)))
