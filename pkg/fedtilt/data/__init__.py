from fedtilt.data.dataset import ClientData, FederatedDataset, Shard
from fedtilt.data.idx import BadMagicError, CountMismatchError, IdxFormatError, TruncatedFileError, load_idx
from fedtilt.data.outliers import GaussianNoise, OutlierSpec, PixelCorruption, inject_outliers
from fedtilt.data.partition import (
    InsufficientClassDataError,
    assign_classes,
    gen_synthetic_images,
    partition_noniid,
)
from fedtilt.data.toy import TOY_SETUP, GaussianGroupSpec, gen_toy

__all__ = [
    "TOY_SETUP",
    "BadMagicError",
    "ClientData",
    "CountMismatchError",
    "FederatedDataset",
    "GaussianGroupSpec",
    "GaussianNoise",
    "IdxFormatError",
    "InsufficientClassDataError",
    "OutlierSpec",
    "PixelCorruption",
    "Shard",
    "TruncatedFileError",
    "assign_classes",
    "gen_synthetic_images",
    "gen_toy",
    "inject_outliers",
    "load_idx",
]
