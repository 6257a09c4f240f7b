"""Part-level leakage metrics and synthetic part/attribute data."""

from ._core import (
    Dataset,
    DatasetSpec,
    NumericalError,
    ValidationError,
    average_precision,
    canonical_config,
    config_hash,
    generate,
    make_report,
    mean_ap,
    mppo,
    nmi_ari,
    part_specificity,
    read_dataset,
    version,
    write_dataset,
)

__version__ = version()

__all__ = [
    "Dataset",
    "DatasetSpec",
    "NumericalError",
    "ValidationError",
    "average_precision",
    "canonical_config",
    "config_hash",
    "generate",
    "make_report",
    "mean_ap",
    "mppo",
    "nmi_ari",
    "part_specificity",
    "read_dataset",
    "version",
    "write_dataset",
]
