"""
Array container used for checkpoints and spectrogram exports.

Layout (see checkpoint_format.md): magic, header length, a UTF-8
``key: value`` header, then the raw little-endian array data.
"""
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"DCLSCKPT"
FORMAT_VERSION = "1"
_LENGTH = struct.Struct("<I")
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(Exception):
    """Custom exception for container and checkpoint errors."""
    pass


class CheckpointCorruptError(CheckpointError):
    """The file is truncated, fails its checksum, or its header is unreadable."""
    pass


class CheckpointVersionError(CheckpointError):
    """The file was written with an unsupported format version."""
    pass


class CheckpointMissingArrayError(CheckpointError):
    """An array the reader needs is not in the file."""
    pass


@dataclass
class Container:
    metadata: Dict[str, str] = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    def require(self, name: str) -> np.ndarray:
        if name not in self.arrays:
            raise CheckpointMissingArrayError(f"missing array {name!r}")
        return self.arrays[name]


def _dtype_code(array: np.ndarray) -> str:
    for code, dtype in _DTYPES.items():
        if array.dtype == dtype or array.dtype == dtype.newbyteorder("="):
            return code
    raise CheckpointError(f"unsupported array dtype {array.dtype}; only float32/float64 are stored")


def write_container(path: Union[str, Path], metadata: Dict[str, str], arrays: Dict[str, np.ndarray]) -> Path:
    """
    Write metadata and named arrays.

    Args:
        path (Union[str, Path]): Destination file
        metadata (Dict[str, str]): Header entries; keys may not contain ':' or newlines
        arrays (Dict[str, np.ndarray]): Named float32/float64 arrays, written in order

    Returns:
        Path: The written path

    Raises:
        CheckpointError: On an unsupported dtype, a bad key, or an I/O failure
    """
    path = Path(path)
    lines: List[str] = [f"format_version: {FORMAT_VERSION}"]
    for key, value in metadata.items():
        if ":" in key or "\n" in key or "\n" in str(value):
            raise CheckpointError(f"invalid metadata entry {key!r}")
        lines.append(f"{key}: {value}")

    chunks: List[bytes] = []
    offset = 0
    for name, array in arrays.items():
        if " " in name:
            raise CheckpointError(f"array names may not contain spaces: {name!r}")
        code = _dtype_code(array)
        data = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
        shape = "x".join(str(d) for d in array.shape) or "scalar"
        lines.append(f"array: {name} {code} {shape} {offset} {len(data)}")
        chunks.append(data)
        offset += len(data)

    body = b"".join(chunks)
    lines.append(f"data_crc32: {zlib.crc32(body):08x}")
    header = ("\n".join(lines) + "\n").encode("utf-8")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(_LENGTH.pack(len(header)))
            f.write(header)
            f.write(body)
    except OSError as e:
        raise CheckpointError(f"cannot write {path}: {e}") from e
    logger.debug("wrote %d arrays (%d bytes) to %s", len(arrays), len(body), path)
    return path


def _parse_shape(text: str) -> Tuple[int, ...]:
    return () if text == "scalar" else tuple(int(d) for d in text.split("x"))


def read_container(path: Union[str, Path]) -> Container:
    """
    Read and verify a container.

    Raises:
        CheckpointError: If the file cannot be opened
        CheckpointCorruptError: On bad magic, truncation, an unreadable header or a CRC mismatch
        CheckpointVersionError: On an unsupported format version
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e

    prefix = len(MAGIC) + _LENGTH.size
    if len(raw) < prefix or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"corrupt container {path}: bad magic or truncated prefix")
    (header_len,) = _LENGTH.unpack_from(raw, len(MAGIC))
    if len(raw) < prefix + header_len:
        raise CheckpointCorruptError(f"corrupt container {path}: truncated header")

    try:
        header = raw[prefix:prefix + header_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointCorruptError(f"corrupt container {path}: header is not UTF-8") from e
    body = raw[prefix + header_len:]

    metadata: Dict[str, str] = {}
    entries = []
    try:
        for line in header.splitlines():
            key, _, value = line.partition(": ")
            if key == "array":
                name, code, shape, offset, nbytes = value.split(" ")
                entries.append((name, _DTYPES[code], _parse_shape(shape), int(offset), int(nbytes)))
            else:
                metadata[key] = value
    except (ValueError, KeyError) as e:
        raise CheckpointCorruptError(f"corrupt container {path}: unreadable header line") from e

    version = metadata.pop("format_version", None)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported container format version {version!r}, expected {FORMAT_VERSION}")

    expected_crc = metadata.pop("data_crc32", None)
    end = max((offset + nbytes for _, _, _, offset, nbytes in entries), default=0)
    if len(body) < end:
        raise CheckpointCorruptError(f"corrupt container {path}: data section truncated")
    if expected_crc is None or f"{zlib.crc32(body):08x}" != expected_crc:
        raise CheckpointCorruptError(f"corrupt container {path}: data checksum mismatch")

    arrays: Dict[str, np.ndarray] = {}
    for name, dtype, shape, offset, nbytes in entries:
        count = int(np.prod(shape)) if shape else 1
        if count * dtype.itemsize != nbytes:
            raise CheckpointCorruptError(f"corrupt container {path}: size of {name!r} does not match its shape")
        arrays[name] = np.frombuffer(body, dtype=dtype, count=count, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))
    return Container(metadata, arrays)
