"""Model checkpoints on top of the array container."""
import logging
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from dcls_audio import __version__
from dcls_audio.container import (
    CheckpointCorruptError,
    Container,
    read_container,
    write_container,
)
from dcls_audio.model import Model, ModelSpec, ModelSpecError, build_model

logger = logging.getLogger(__name__)

KIND = "checkpoint"


def save_checkpoint(
    model: Model,
    path: Union[str, Path],
    seed: Optional[int] = None,
    extra: Optional[Dict[str, str]] = None,
) -> Path:
    """
    Write every distinct parameter of ``model`` plus its spec.

    Shared positions/sigmas are stored once under their ``shared.<tag>`` name;
    loading rebuilds the sharing from the spec.

    Args:
        model (Model): Model to save
        path (Union[str, Path]): Destination file
        seed (Optional[int]): Seed recorded in the metadata
        extra (Optional[Dict[str, str]]): Additional metadata entries

    Returns:
        Path: The written path
    """
    metadata = {
        "kind": KIND,
        "version": __version__,
        "seed": "" if seed is None else str(seed),
        "spec_hash": model.spec.spec_hash(),
    }
    for line in model.spec.to_text().splitlines():
        key, _, value = line.partition("=")
        metadata[f"spec.{key}"] = value
    metadata.update(extra or {})

    arrays = {name: param.value for name, param in model.named_parameters()}
    written = write_container(path, metadata, arrays)
    logger.info("saved checkpoint with %d arrays to %s", len(arrays), written)
    return written


def read_spec(container: Container) -> ModelSpec:
    """
    Rebuild and verify the model spec stored in a checkpoint header.

    Raises:
        CheckpointCorruptError: If the spec is missing, invalid or does not match its hash
    """
    values = {key[len("spec."):]: value for key, value in container.metadata.items() if key.startswith("spec.")}
    if container.metadata.get("kind") != KIND or not values:
        raise CheckpointCorruptError("corrupt container: no model spec in header")
    try:
        spec = ModelSpec.from_mapping(values)
    except ModelSpecError as e:
        raise CheckpointCorruptError(f"corrupt container: invalid model spec ({e})") from e
    if spec.spec_hash() != container.metadata.get("spec_hash"):
        raise CheckpointCorruptError("corrupt container: spec hash mismatch")
    return spec


def load_checkpoint(path: Union[str, Path]) -> Model:
    """
    Load a model saved by ``save_checkpoint``.

    Returns:
        Model: Model whose forward output matches the saved one bitwise

    Raises:
        CheckpointCorruptError: Truncated file, checksum or spec-hash mismatch, shape mismatch, unexpected arrays
        CheckpointVersionError: Unsupported format version
        CheckpointMissingArrayError: A parameter has no array in the file
    """
    container = read_container(path)
    spec = read_spec(container)

    dtypes = {array.dtype for array in container.arrays.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
    model = build_model(spec, np.random.default_rng(0), dtype=dtype)

    expected = dict(model.named_parameters())
    for name, param in expected.items():
        array = container.require(name)
        if array.shape != param.value.shape:
            raise CheckpointCorruptError(
                f"corrupt container: array {name!r} has shape {array.shape}, expected {param.value.shape}"
            )
        param.value = array.astype(param.value.dtype, copy=True)
        param.zero_grad()

    unexpected = set(container.arrays) - set(expected)
    if unexpected:
        raise CheckpointCorruptError(f"corrupt container: unexpected arrays {sorted(unexpected)}")
    logger.info("loaded checkpoint %s (%s)", path, spec.conv_method)
    return model


def checkpoint_seed(path: Union[str, Path]) -> Optional[int]:
    seed = read_container(path).metadata.get("seed", "")
    return int(seed) if seed else None
