"""
Dataset manifests (CSV ``path,labels`` + label vocabulary) and a synthetic
multi-label tagging dataset generator.
"""
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import pandas as pd

from dcls_audio import config
from dcls_audio.audio import AudioClip, AudioError, write_wav

logger = logging.getLogger(__name__)

MAX_SYNTHETIC_CLASSES = 16
TONE_CLASSES = 12
# linear chirps (start Hz, end Hz) for classes 12..15
CHIRP_BANDS = ((400.0, 800.0), (1500.0, 3000.0), (4000.0, 6000.0), (10000.0, 13000.0))


class ManifestError(Exception):
    """Custom exception for manifest and dataset generation errors."""
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    labels: Tuple[int, ...]


@dataclass
class Manifest:
    """Clip paths with their label sets, and the label vocabulary."""

    entries: List[ManifestEntry]
    vocabulary: List[str]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.vocabulary)

    def resolve(self, path: str) -> Path:
        """Relative entries are relative to the manifest's directory."""
        candidate = Path(path)
        return candidate if candidate.is_absolute() else self.root / candidate

    def targets(self) -> np.ndarray:
        """Multi-hot matrix of shape (N, num_classes), float32."""
        targets = np.zeros((len(self.entries), self.num_classes), dtype=np.float32)
        for row, entry in enumerate(self.entries):
            targets[row, list(entry.labels)] = 1.0
        return targets


def load_vocabulary(labels_path: Union[str, Path]) -> List[str]:
    labels_path = Path(labels_path)
    if not labels_path.is_file():
        raise ManifestError(f"labels file not found: {labels_path}")
    names = [line.strip() for line in labels_path.read_text(encoding="utf-8").splitlines()]
    names = [name for name in names if name]
    if not names:
        raise ManifestError(f"labels file {labels_path} is empty")
    return names


def _parse_labels(raw: str, row: int, vocab_size: int) -> Tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    try:
        labels = sorted({int(token) for token in raw.split(";")})
    except ValueError as e:
        raise ManifestError(f"malformed row {row}: labels {raw!r} are not ';'-separated integers") from e
    if labels[0] < 0 or labels[-1] >= vocab_size:
        raise ManifestError(f"label index out of range at row {row}")
    return tuple(labels)


def load_manifest(csv_path: Union[str, Path], labels_path: Union[str, Path]) -> Manifest:
    """
    Parse and validate a manifest.

    Rows are numbered from 1 after the header line.

    Args:
        csv_path (Union[str, Path]): CSV with columns ``path,labels``
        labels_path (Union[str, Path]): Vocabulary, one class name per line

    Returns:
        Manifest: Validated manifest rooted at the CSV's directory

    Raises:
        ManifestError: Missing files, malformed rows, out-of-range labels or duplicate paths
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise ManifestError(f"manifest not found: {csv_path}")
    vocabulary = load_vocabulary(labels_path)

    try:
        frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        row = int(match.group(1)) - 1 if match else "?"
        raise ManifestError(f"malformed row {row}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise ManifestError(f"manifest {csv_path} is empty") from e

    if list(frame.columns) != ["path", "labels"]:
        raise ManifestError(f"manifest header must be 'path,labels', got {','.join(map(str, frame.columns))}")

    entries: List[ManifestEntry] = []
    seen = set()
    for row, (path, labels) in enumerate(zip(frame["path"], frame["labels"]), start=1):
        if not isinstance(path, str) or not isinstance(labels, str) or not path.strip():
            raise ManifestError(f"malformed row {row}: expected 'path,labels'")
        path = path.strip()
        if path in seen:
            raise ManifestError(f"duplicate path {path!r} at row {row}")
        seen.add(path)
        entries.append(ManifestEntry(path, _parse_labels(labels, row, len(vocabulary))))

    logger.debug("loaded %d manifest entries from %s", len(entries), csv_path)
    return Manifest(entries, vocabulary, csv_path.parent)


def save_manifest(manifest: Manifest, csv_path: Union[str, Path], labels_path: Union[str, Path]) -> None:
    """Write the manifest CSV and its vocabulary file."""
    frame = pd.DataFrame({
        "path": [entry.path for entry in manifest.entries],
        "labels": [";".join(str(label) for label in entry.labels) for entry in manifest.entries],
    })
    try:
        frame.to_csv(csv_path, index=False)
        Path(labels_path).write_text("\n".join(manifest.vocabulary) + "\n", encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot write manifest: {e}") from e


def class_name(k: int) -> str:
    if k < TONE_CLASSES:
        return f"tone_{class_frequency(k):.0f}hz"
    low, high = CHIRP_BANDS[k - TONE_CLASSES]
    return f"chirp_{low:.0f}_{high:.0f}hz"


def class_frequency(k: int) -> float:
    """Tone frequency of class k (k < 12): 200 * 2^(k/2) Hz."""
    return 200.0 * 2.0 ** (k / 2.0)


def class_signature(k: int, n_samples: int, sample_rate: int, phase: float = 0.0) -> np.ndarray:
    """Unit-amplitude signature of class k: a tone, or a linear chirp for k >= 12."""
    t = np.arange(n_samples, dtype=np.float64) / sample_rate
    if k < TONE_CLASSES:
        return np.sin(2.0 * np.pi * class_frequency(k) * t + phase)
    low, high = CHIRP_BANDS[k - TONE_CLASSES]
    duration = n_samples / sample_rate
    sweep = (high - low) / max(duration, 1e-12)
    return np.sin(2.0 * np.pi * (low * t + 0.5 * sweep * t * t) + phase)


def synth_clip(
    index: int, n_classes: int, seed: int, duration: float = 10.0, sample_rate: int = 32000
) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """
    Deterministic clip ``index``: 1-3 class signatures plus white noise at an
    SNR drawn from U(5, 20) dB, peak-normalized to 0.9.

    Returns:
        Tuple[np.ndarray, Tuple[int, ...]]: (float64 samples, sorted labels)
    """
    rng = np.random.default_rng([seed, index])
    n_samples = int(round(duration * sample_rate))
    count = int(rng.integers(1, min(3, n_classes) + 1))
    labels = tuple(sorted(int(k) for k in rng.choice(n_classes, size=count, replace=False)))

    signal = np.zeros(n_samples)
    for k in labels:
        signal += rng.uniform(0.5, 1.0) * class_signature(k, n_samples, sample_rate, rng.uniform(0, 2 * np.pi))
    snr_db = rng.uniform(5.0, 20.0)
    noise_power = np.mean(signal ** 2) / 10.0 ** (snr_db / 10.0)
    signal += rng.normal(0.0, np.sqrt(noise_power), size=n_samples)

    peak = np.max(np.abs(signal))
    if peak > 0:
        signal *= 0.9 / peak
    return signal, labels


def gen_synthetic(
    out_dir: Union[str, Path],
    n_clips: int,
    n_classes: int,
    seed: int = config.DEFAULT_SEED,
    duration: float = 10.0,
    sample_rate: int = 32000,
    threads: int = 1,
) -> Manifest:
    """
    Generate WAV clips plus ``manifest.csv`` and ``labels.txt`` in ``out_dir``.

    Each clip has its own random stream, so files do not depend on ``threads``.

    Returns:
        Manifest: Manifest of the generated clips

    Raises:
        ManifestError: Invalid counts or an unwritable directory
    """
    if not 1 <= n_classes <= MAX_SYNTHETIC_CLASSES:
        raise ManifestError(f"n_classes must be in [1, {MAX_SYNTHETIC_CLASSES}], got {n_classes}")
    if n_clips < 1:
        raise ManifestError(f"n_clips must be positive, got {n_clips}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ManifestError(f"cannot write to {out_dir}: {e}") from e

    def make(index: int) -> ManifestEntry:
        samples, labels = synth_clip(index, n_classes, seed, duration, sample_rate)
        name = f"clip_{index:05d}.wav"
        try:
            write_wav(out_dir / name, AudioClip(samples.astype(np.float32), sample_rate))
        except AudioError as e:
            raise ManifestError(f"cannot write to {out_dir}: {e}") from e
        return ManifestEntry(name, labels)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        entries = list(pool.map(make, range(n_clips)))

    manifest = Manifest(entries, [class_name(k) for k in range(n_classes)], out_dir)
    save_manifest(manifest, out_dir / "manifest.csv", out_dir / "labels.txt")
    logger.info("generated %d clips over %d classes in %s", n_clips, n_classes, out_dir)
    return manifest
