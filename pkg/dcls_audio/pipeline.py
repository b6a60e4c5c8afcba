"""
Training and evaluation pipeline - integration module that combines audio
ingestion, the model, the optimizers and the metrics.
"""
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from dcls_audio.audio import AudioClip, AugmentConfig, FrontendConfig, featurize, load_wav
from dcls_audio.checkpoint import save_checkpoint
from dcls_audio.datasets import Manifest
from dcls_audio.metrics import EvalBuffer, MetricError, mean_average_precision
from dcls_audio.model import Model, backward, forward, forward_with_tape
from dcls_audio.tensor_core import NonFiniteError
from dcls_audio.train import (
    OptimState,
    TrainConfig,
    TrainingError,
    bce_multilabel,
    clip_grad_norm,
    label_smooth,
    lr_at,
    mixup,
    optimizer_step,
)

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "step", "lr", "loss", "mAP"]


class FeatureLoader:
    """
    Turns manifest rows into spectrogram batches.

    Decoded waveforms are cached. Augmented features use a random stream per
    (seed, epoch, index), so batches do not depend on the worker count.
    """

    def __init__(
        self,
        manifest: Manifest,
        frontend: Optional[FrontendConfig] = None,
        clip_seconds: float = 10.0,
        threads: int = 1,
        resample: bool = False,
        augment: Optional[AugmentConfig] = None,
    ):
        self.manifest = manifest
        self.frontend = frontend or FrontendConfig()
        self.target_len = int(round(clip_seconds * self.frontend.sample_rate))
        self.threads = threads
        self.resample = resample
        self.augment = augment or AugmentConfig()
        self.targets = manifest.targets()
        self._clips: Dict[int, AudioClip] = {}
        self._plain: Dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.manifest)

    def clip(self, index: int) -> AudioClip:
        with self._lock:
            cached = self._clips.get(index)
        if cached is None:
            path = self.manifest.resolve(self.manifest.entries[index].path)
            cached = load_wav(path, resample=self.resample, target_rate=self.frontend.sample_rate)
            with self._lock:
                self._clips[index] = cached
        return cached

    def item(self, index: int, epoch: int = 0, seed: int = 0, augment: bool = False) -> np.ndarray:
        if augment:
            rng = np.random.default_rng([seed, epoch, index])
            return featurize(self.clip(index), self.frontend, self.target_len, rng, self.augment)
        with self._lock:
            cached = self._plain.get(index)
        if cached is None:
            cached = featurize(self.clip(index), self.frontend, self.target_len)
            with self._lock:
                self._plain[index] = cached
        return cached

    def features(self, indices: Sequence[int], epoch: int = 0, seed: int = 0, augment: bool = False) -> np.ndarray:
        """Batch of shape (B, 1, n_mels, T) in the order of ``indices``."""
        indices = [int(i) for i in indices]
        if self.threads == 1:
            items = [self.item(i, epoch, seed, augment) for i in indices]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                items = list(pool.map(lambda i: self.item(i, epoch, seed, augment), indices))
        return np.stack(items)


def _batches(order: Sequence[int], batch_size: int) -> List[Sequence[int]]:
    return [order[start:start + batch_size] for start in range(0, len(order), batch_size)]


def predict(model: Model, loader: FeatureLoader, batch_size: int = 32) -> np.ndarray:
    """Sigmoid scores (N, C); batches run concurrently on the read-only model."""
    batches = _batches(list(range(len(loader))), batch_size)

    def score(indices: Sequence[int]) -> np.ndarray:
        return expit(forward(model, loader.features(indices), mode="eval").astype(np.float64))

    if loader.threads == 1 or len(batches) == 1:
        outputs = [score(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=loader.threads) as pool:
            outputs = list(pool.map(score, batches))
    return np.concatenate(outputs)


def evaluate(
    model: Model,
    manifest: Manifest,
    loader: Optional[FeatureLoader] = None,
    batch_size: int = 32,
    clip_seconds: float = 10.0,
    threads: int = 1,
    resample: bool = False,
) -> Tuple[EvalBuffer, float]:
    """
    Score every clip of ``manifest`` without augmentation.

    Returns:
        Tuple[EvalBuffer, float]: Scores/labels and the mAP

    Raises:
        MetricError: If no class has a positive label
    """
    loader = loader or FeatureLoader(manifest, clip_seconds=clip_seconds, threads=threads, resample=resample)
    buf = EvalBuffer.from_arrays(predict(model, loader, batch_size), loader.targets)
    return buf, mean_average_precision(buf)


def position_snapshot(model: Model) -> Dict[str, np.ndarray]:
    return {name: param.value.copy() for name, param in model.named_parameters() if param.group == "position"}


def mean_position_shift(initial: Dict[str, np.ndarray], model: Model) -> float:
    """Mean |P_final - P_initial| over every position array of the model."""
    final = position_snapshot(model)
    if not initial or not final:
        return 0.0
    diffs = np.concatenate([np.abs(final[name] - initial[name]).ravel() for name in initial])
    return float(diffs.mean())


@dataclass
class TrainResult:
    model: Model
    history: pd.DataFrame
    checkpoint_path: Optional[Path] = None
    history_path: Optional[Path] = None
    position_shift: Optional[float] = None


def _safe_map(model: Model, manifest: Manifest, loader: FeatureLoader, batch_size: int) -> float:
    try:
        return evaluate(model, manifest, loader, batch_size)[1]
    except MetricError as e:
        logger.warning("mAP not available: %s", e)
        return float("nan")


def train_loop(
    model: Model,
    manifest: Manifest,
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    out_dir: Optional[Union[str, Path]] = None,
    eval_manifest: Optional[Manifest] = None,
    frontend: Optional[FrontendConfig] = None,
    resample: bool = False,
) -> TrainResult:
    """
    Train ``model`` in place.

    Each step: augmented features -> mixup -> label smoothing -> BCE ->
    backward -> (optional clipping) -> optimizer step with the warmup +
    cosine learning rate; bounded parameters (DCLS positions) are clamped by
    the optimizer. The model is scored after every epoch on
    ``eval_manifest`` (default: the training manifest, unaugmented).

    Args:
        model (Model): Model to train
        manifest (Manifest): Training clips
        cfg (TrainConfig): Training recipe
        rng (Optional[np.random.Generator]): Stream for shuffling, mixup and drop path (default: seeded by cfg.seed)
        out_dir (Optional[Union[str, Path]]): Where history.csv and checkpoint.ckpt go
        eval_manifest (Optional[Manifest]): Held-out clips
        frontend (Optional[FrontendConfig]): Spectrogram settings
        resample (bool): Resample clips whose rate differs from the frontend

    Returns:
        TrainResult: Model, history and output paths

    Raises:
        TrainingError: On an empty dataset or a non-finite loss
    """
    cfg.validate()
    if len(manifest) == 0:
        raise TrainingError("empty dataset: the training manifest has no entries")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    frontend = frontend or FrontendConfig()

    loader = FeatureLoader(manifest, frontend, cfg.clip_seconds, cfg.threads, resample)
    eval_loader = loader
    if eval_manifest is not None:
        eval_loader = FeatureLoader(eval_manifest, frontend, cfg.clip_seconds, cfg.threads, resample)

    model.set_drop_path(cfg.drop_path)
    params = model.parameters()
    state = OptimState.create(params)
    initial_positions = position_snapshot(model)

    steps_per_epoch = math.ceil(len(manifest) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        lr = 0.0
        for indices in _batches(rng.permutation(len(manifest)), cfg.batch_size):
            x = loader.features(indices, epoch, cfg.seed, augment=cfg.augment)
            y = loader.targets[indices]
            x, y = mixup(x, y, cfg.mixup_alpha, rng)
            y = label_smooth(y, cfg.label_smoothing)

            model.zero_grad()
            try:
                logits, ctx = forward_with_tape(model, x, "train", rng)
                loss, grad = bce_multilabel(logits, y)
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss} at epoch {epoch + 1}, step {step + 1}")
                backward(model, grad, ctx)
            except NonFiniteError as e:
                raise TrainingError(f"non-finite values at epoch {epoch + 1}, step {step + 1}: {e}") from e
            if cfg.grad_clip is not None:
                clip_grad_norm(params, cfg.grad_clip)

            step += 1
            lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr)
            optimizer_step(params, state, lr, cfg)
            losses.append(loss)

        score = _safe_map(model, eval_manifest or manifest, eval_loader, cfg.batch_size)
        rows.append({"epoch": epoch + 1, "step": step, "lr": lr, "loss": float(np.mean(losses)), "mAP": score})
        logger.info("epoch %d/%d: loss %.4f, lr %.3g, mAP %.4f", epoch + 1, cfg.epochs, rows[-1]["loss"], lr, score)

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    shift = mean_position_shift(initial_positions, model) if initial_positions else None
    if shift is not None:
        logger.info("mean |dP| after training: %.4f grid units", shift)

    result = TrainResult(model, history, position_shift=shift)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.history_path = out_dir / "history.csv"
        history.to_csv(result.history_path, index=False)
        result.checkpoint_path = save_checkpoint(
            model, out_dir / "checkpoint.ckpt", seed=cfg.seed, extra={"optim_step": str(state.step)}
        )
    return result
