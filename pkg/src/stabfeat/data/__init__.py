"""Dataset preparation, file formats and synthetic data."""

from . import formats  # noqa: F401
from .prep import (  # noqa: F401
    DEFAULT_CATEGORIES,
    DEFAULT_DYNAMIC,
    DEFAULT_STATIC,
    LabelMap,
    TripletRecord,
    mine_triplets,
    stability_from_labels,
)
