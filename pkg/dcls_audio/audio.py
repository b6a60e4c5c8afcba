"""
WAV ingestion, the log-mel frontend and the waveform/spectrogram augmentations.

All augmentations take an explicit ``numpy.random.Generator`` and are the
identity when their probability gate fails.
"""
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import librosa
import numpy as np
from scipy.io import wavfile

logger = logging.getLogger(__name__)

HTK = "htk"
SLANEY = "slaney"


class AudioError(Exception):
    """Custom exception for audio ingestion and frontend errors."""
    pass


@dataclass(frozen=True)
class FrontendConfig:
    """Spectrogram settings of the AudioSet recipe."""

    n_fft: int = 1024
    hop: int = 320
    power: float = 2.0
    n_mels: int = 128
    sample_rate: int = 32000
    f_min: float = 50.0
    f_max: float = 14000.0
    amin: float = 1e-10
    norm_mean: float = -18.2696
    norm_std: float = 30.5735
    mel_scale: str = HTK

    def __post_init__(self):
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise AudioError(
                f"need 0 <= f_min < f_max <= sample_rate/2, got {self.f_min}, {self.f_max}, {self.sample_rate}"
            )
        if not 0 < self.hop <= self.n_fft:
            raise AudioError(f"need 0 < hop <= n_fft, got hop={self.hop}, n_fft={self.n_fft}")
        if self.amin <= 0 or self.norm_std <= 0:
            raise AudioError("amin and norm_std must be positive")
        if self.mel_scale not in (HTK, SLANEY):
            raise AudioError(f"mel_scale must be {HTK!r} or {SLANEY!r}, got {self.mel_scale!r}")


@dataclass(frozen=True)
class AugmentConfig:
    """Probabilities and geometry of the training-time augmentations."""

    roll_p: float = 1.0
    speed_p: float = 0.5
    speed_rates: Tuple[float, float] = (0.5, 1.5)
    erase_p: float = 0.25
    erase_scale: Tuple[float, float] = (0.02, 0.33)
    erase_ratio: Tuple[float, float] = (0.3, 3.3)
    erase_value: float = 0.0
    erase_attempts: int = 10


@dataclass
class AudioClip:
    """Mono float32 samples in [-1, 1] at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise AudioError(f"clip samples must be 1-D (mono), got shape {self.samples.shape}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def load_wav(path: Union[str, Path], resample: bool = False, target_rate: int = 32000) -> AudioClip:
    """
    Read a 16-bit PCM or 32-bit float WAV file as a mono clip.

    Multi-channel audio is averaged; 16-bit samples are scaled by 1/32768.

    Args:
        path (Union[str, Path]): WAV file
        resample (bool): Linearly resample to ``target_rate`` instead of failing
        target_rate (int): Expected sample rate

    Returns:
        AudioClip: Mono clip at ``target_rate``

    Raises:
        AudioError: Missing file, malformed header, unsupported codec, or sample-rate mismatch
    """
    path = Path(path)
    if not path.is_file():
        raise AudioError(f"file not found: {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except ValueError as e:
        message = str(e).lower()
        if "format" in message and ("unknown" in message or "not supported" in message):
            raise AudioError(f"unsupported codec in {path}: {e}") from e
        raise AudioError(f"malformed header in {path}: {e}") from e
    except (EOFError, OSError) as e:
        raise AudioError(f"malformed header in {path}: {e}") from e

    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise AudioError(f"unsupported codec in {path}: sample type {data.dtype} (expected 16-bit PCM or 32-bit float)")
    if samples.ndim == 2:
        logger.debug("%s: averaging %d channels", path, samples.shape[1])
        samples = samples.mean(axis=1)

    clip = AudioClip(np.ascontiguousarray(samples, dtype=np.float32), int(rate))
    if clip.sample_rate != target_rate:
        if not resample:
            raise AudioError(
                f"sample-rate mismatch: {path} is {clip.sample_rate} Hz, expected {target_rate} Hz (use --resample)"
            )
        logger.info("resampling %s from %d Hz to %d Hz", path, clip.sample_rate, target_rate)
        clip = resample_linear(clip, target_rate)
    return clip


def write_wav(path: Union[str, Path], clip: AudioClip) -> Path:
    """Write a clip as 16-bit PCM (values are clipped to [-1, 32767/32768])."""
    path = Path(path)
    pcm = np.clip(np.round(clip.samples.astype(np.float64) * 32768.0), -32768, 32767).astype(np.int16)
    try:
        wavfile.write(path, clip.sample_rate, pcm)
    except OSError as e:
        raise AudioError(f"cannot write {path}: {e}") from e
    return path


def _interpolate(samples: np.ndarray, new_length: int, step: float) -> np.ndarray:
    source = np.arange(len(samples), dtype=np.float64)
    grid = np.minimum(np.arange(new_length, dtype=np.float64) * step, max(len(samples) - 1, 0))
    return np.interp(grid, source, samples).astype(np.float32)


def resample_linear(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear interpolation onto the new grid; length round(len * target / source)."""
    if target_rate <= 0:
        raise AudioError(f"target rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    new_length = int(round(len(clip.samples) * target_rate / clip.sample_rate))
    samples = _interpolate(clip.samples, new_length, clip.sample_rate / target_rate)
    return AudioClip(samples, target_rate)


def pad_or_truncate(clip: AudioClip, target_len: Optional[int] = None) -> AudioClip:
    """Keep the head of long clips, append zeros to short ones (default 10 s)."""
    target_len = 10 * clip.sample_rate if target_len is None else target_len
    samples = clip.samples[:target_len]
    if len(samples) < target_len:
        samples = np.concatenate([samples, np.zeros(target_len - len(samples), dtype=samples.dtype)])
    return AudioClip(np.ascontiguousarray(samples), clip.sample_rate)


def stft_power(samples: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Centred, reflect-padded Hann STFT raised to ``cfg.power``: (n_fft/2 + 1, T)."""
    spectrum = librosa.stft(
        samples.astype(np.float64),
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        win_length=cfg.n_fft,
        window="hann",
        center=True,
        pad_mode="reflect",
    )
    return np.abs(spectrum) ** cfg.power


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular filters (n_mels, n_fft/2 + 1), unnormalized, within [f_min, f_max]."""
    return librosa.filters.mel(
        sr=cfg.sample_rate,
        n_fft=cfg.n_fft,
        n_mels=cfg.n_mels,
        fmin=cfg.f_min,
        fmax=cfg.f_max,
        htk=cfg.mel_scale == HTK,
        norm=None,
        dtype=np.float64,
    )


def hz_to_mel(frequency: float, mel_scale: str = HTK) -> float:
    return float(librosa.hz_to_mel(frequency, htk=mel_scale == HTK))


def amplitude_to_db(power: np.ndarray, amin: float = 1e-10) -> np.ndarray:
    """10 * log10(max(power, amin)), reference 1.0, no top-dB clipping."""
    return librosa.power_to_db(power, ref=1.0, amin=amin, top_db=None)


def normalize(spec: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    return (spec - cfg.norm_mean) / cfg.norm_std


def denormalize(spec: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    return spec * cfg.norm_std + cfg.norm_mean


def logmel(clip: AudioClip, cfg: Optional[FrontendConfig] = None) -> np.ndarray:
    """
    Normalized log-mel spectrogram of shape (1, n_mels, T), T = len // hop + 1.

    Args:
        clip (AudioClip): Clip at ``cfg.sample_rate``
        cfg (Optional[FrontendConfig]): Frontend settings (default recipe)

    Returns:
        np.ndarray: float32 spectrogram

    Raises:
        AudioError: If the rate differs from the config or the clip is shorter than one hop
    """
    cfg = cfg or FrontendConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise AudioError(f"sample-rate mismatch: clip is {clip.sample_rate} Hz, frontend expects {cfg.sample_rate} Hz")
    if len(clip.samples) < cfg.hop:
        raise AudioError(f"clip shorter than one hop ({len(clip.samples)} < {cfg.hop} samples)")
    mel = mel_filterbank(cfg) @ stft_power(clip.samples, cfg)
    spec = normalize(amplitude_to_db(mel, cfg.amin), cfg)
    return spec[None].astype(np.float32)


def augment_random_roll(clip: AudioClip, rng: np.random.Generator, p: float = 1.0) -> AudioClip:
    """Circular shift by an integer drawn uniformly from [-N, N]."""
    if rng.random() >= p:
        return clip
    n = len(clip.samples)
    shift = int(rng.integers(-n, n + 1))
    return AudioClip(np.roll(clip.samples, shift), clip.sample_rate)


def speed_change(clip: AudioClip, rate: float) -> AudioClip:
    """Play back ``rate`` times faster: new length round(len / rate)."""
    if rate <= 0:
        raise AudioError(f"speed rate must be positive, got {rate}")
    new_length = int(round(len(clip.samples) / rate))
    return AudioClip(_interpolate(clip.samples, new_length, rate), clip.sample_rate)


def augment_speed(
    clip: AudioClip, rng: np.random.Generator, p: float = 0.5, rates: Tuple[float, float] = (0.5, 1.5)
) -> AudioClip:
    """With probability ``p``, change speed at a rate drawn uniformly from ``rates``."""
    if rng.random() >= p:
        return clip
    return speed_change(clip, float(rng.uniform(*rates)))


def augment_erase(spec: np.ndarray, rng: np.random.Generator, aug: Optional[AugmentConfig] = None) -> np.ndarray:
    """
    Random erasing on a (1, F, T) spectrogram: with probability ``erase_p``
    one rectangle is set to ``erase_value``. Placement is retried up to
    ``erase_attempts`` times; if no rectangle fits the input is returned.
    """
    aug = aug or AugmentConfig()
    if rng.random() >= aug.erase_p:
        return spec
    _, height, width = spec.shape
    area = height * width
    log_ratio = (math.log(aug.erase_ratio[0]), math.log(aug.erase_ratio[1]))
    for _ in range(aug.erase_attempts):
        target_area = area * rng.uniform(*aug.erase_scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        h = int(round(math.sqrt(target_area * aspect)))
        w = int(round(math.sqrt(target_area / aspect)))
        if 0 < h < height and 0 < w < width:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            erased = spec.copy()
            erased[:, top:top + h, left:left + w] = aug.erase_value
            return erased
    logger.debug("random erasing: no rectangle fit a %dx%d spectrogram", height, width)
    return spec


def featurize(
    clip: AudioClip,
    cfg: FrontendConfig,
    target_len: int,
    rng: Optional[np.random.Generator] = None,
    aug: Optional[AugmentConfig] = None,
) -> np.ndarray:
    """
    Clip to training features: roll -> speed -> pad/truncate -> log-mel -> erase.

    Without ``rng`` no augmentation is applied.
    """
    if rng is not None:
        aug = aug or AugmentConfig()
        clip = augment_random_roll(clip, rng, aug.roll_p)
        clip = augment_speed(clip, rng, aug.speed_p, aug.speed_rates)
    spec = logmel(pad_or_truncate(clip, target_len), cfg)
    if rng is not None:
        spec = augment_erase(spec, rng, aug)
    return spec
