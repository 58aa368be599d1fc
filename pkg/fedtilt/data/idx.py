import gzip
from pathlib import Path
from typing import Final

import numpy as np
from loguru import logger

from fedtilt.data.dataset import Shard

IMAGES_MAGIC: Final = 0x00000803
LABELS_MAGIC: Final = 0x00000801


class IdxFormatError(ValueError):
    """An IDX file could not be decoded."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as file:
            return file.read()
    return path.read_bytes()


def _parse(data: bytes, path: Path, magic: int, num_dims: int) -> np.ndarray:
    """Decode the big-endian header and the unsigned byte payload of an IDX file."""
    header_size = 4 * (1 + num_dims)
    if len(data) < header_size:
        raise TruncatedFileError(f"{path}: file too short for an IDX header ({len(data)} bytes)")
    header = np.frombuffer(data, dtype=">u4", count=1 + num_dims)
    if int(header[0]) != magic:
        raise BadMagicError(f"{path}: bad magic number 0x{int(header[0]):08x}, expected 0x{magic:08x}")

    dims = tuple(int(dim) for dim in header[1:])
    expected = int(np.prod(dims))
    payload = np.frombuffer(data, dtype=np.uint8, offset=header_size)
    if payload.size < expected:
        raise TruncatedFileError(f"{path}: expected {expected} data bytes for dimensions {dims}, got {payload.size}")
    return payload[:expected].reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path) -> Shard:
    """Load an IDX image/label file pair (optionally gzip-compressed) as flattened features scaled to [0, 1]."""
    images_path = Path(images_path)
    labels_path = Path(labels_path)
    images = _parse(_read_bytes(images_path), images_path, IMAGES_MAGIC, num_dims=3)
    labels = _parse(_read_bytes(labels_path), labels_path, LABELS_MAGIC, num_dims=1)
    if len(images) != len(labels):
        raise CountMismatchError(f"label/image count mismatch: {len(labels)} labels, {len(images)} images")

    logger.info(f"Loaded {len(images)} images of size {images.shape[1]}x{images.shape[2]} from {images_path}")
    return Shard(images.reshape(len(images), -1).astype(np.float64) / 255.0, labels.astype(np.int64))
