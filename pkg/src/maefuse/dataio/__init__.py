"""Volume ingestion, slice preprocessing, augmentation and samplers."""

from .augment import IDENTITY, AugmentPolicy, augment
from .nifti import parse_nifti1, write_nifti1
from .preprocess import preprocess_mask, preprocess_slice
from .records import (
    DatasetIndex,
    Entry,
    SliceRecord,
    VolumeCache,
    brain_coverage_weight,
    few_shot_sample,
    load_records,
    read_manifest,
    write_manifest,
)
from .volume import Volume, extract_slices, load_volume, read_raw, resample_isotropic, write_raw

__all__ = [
    "IDENTITY",
    "AugmentPolicy",
    "DatasetIndex",
    "Entry",
    "SliceRecord",
    "Volume",
    "VolumeCache",
    "augment",
    "brain_coverage_weight",
    "extract_slices",
    "few_shot_sample",
    "load_records",
    "load_volume",
    "parse_nifti1",
    "preprocess_mask",
    "preprocess_slice",
    "read_manifest",
    "read_raw",
    "resample_isotropic",
    "write_manifest",
    "write_nifti1",
    "write_raw",
]
