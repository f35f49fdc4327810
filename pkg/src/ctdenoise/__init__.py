"""Label-noise learning with a causal transition model.

The package trains twin classifiers under noisy labels by separating each
instance into a noise-resistant component (which determines the clean label)
and a noise-sensitive component (which, together with the confident label and
injected noise, drives a learned transition model toward the observed noisy
label).  A discrete structural-causal-model oracle verifies the identifiability
claims behind that construction by exact enumeration.
"""

__version__ = "0.1.0"

from .errors import (
    CtdenoiseError,
    DivergenceError,
    LabelRangeError,
    ManifestError,
    MissingFileError,
    NonFiniteError,
    SizeMismatchError,
    ValidationError,
    ZeroProbabilityError,
)

__all__ = [
    "CtdenoiseError",
    "DivergenceError",
    "LabelRangeError",
    "ManifestError",
    "MissingFileError",
    "NonFiniteError",
    "SizeMismatchError",
    "ValidationError",
    "ZeroProbabilityError",
    "__version__",
]
