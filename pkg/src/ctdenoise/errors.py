"""Named failure types used across the package."""


class CtdenoiseError(Exception):
    """Base class for all package errors."""


class ManifestError(CtdenoiseError):
    """Manifest file is malformed or carries invalid fields."""


class MissingFileError(CtdenoiseError):
    """A file referenced by a manifest or config does not exist."""


class SizeMismatchError(CtdenoiseError):
    """On-disk blob size disagrees with the manifest."""


class LabelRangeError(CtdenoiseError):
    """A label value falls outside [0, num_classes)."""


class ValidationError(CtdenoiseError):
    """An argument or config value violates its contract."""


class NonFiniteError(CtdenoiseError):
    """A tensor produced by a forward pass contains NaN or Inf."""


class ZeroProbabilityError(CtdenoiseError):
    """Conditioning on an event of probability zero."""


class DivergenceError(CtdenoiseError):
    """Training loss became non-finite.  Carries the epoch it happened in."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class EmptySelectionError(CtdenoiseError):
    """Confident-example selection produced an empty set."""
