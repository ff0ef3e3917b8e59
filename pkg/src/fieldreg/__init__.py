"""Convolutional field-to-field surrogates for random-field uncertainty propagation
through a clamped Mindlin plate."""

__version__ = "0.1.0"

from .errors import (
    BadMagic,
    CheckpointMismatch,
    ConfigError,
    DegenerateData,
    FieldRegError,
    FormatError,
    InsufficientSamples,
    InvalidArgument,
    InvalidState,
    NotPositiveDefinite,
    NumericalFailure,
    ShapeMismatch,
    TruncatedPayload,
)
from .field import Dataset, Field, dataset_read, dataset_write, field_new
