"""Exception hierarchy shared across the toolkit."""


class SlidekitError(Exception):
    """Base class for all toolkit errors."""


class InsufficientTissue(SlidekitError):
    """Too few above-threshold pixels to estimate a stain basis."""


class DegenerateStains(SlidekitError):
    """The optical-density cloud is effectively one-dimensional."""


class ExtractionTooLarge(SlidekitError):
    """Planned extraction size exceeds the slide dimensions."""


class CropTooLarge(SlidekitError):
    """Requested crop is larger than the input image."""


class InsufficientFeatures(SlidekitError):
    """Not enough features to run the sampling protocol."""


class SingleCluster(SlidekitError):
    """Fewer than two distinct cluster labels."""


class PerplexityTooLarge(SlidekitError):
    """t-SNE perplexity incompatible with the number of points."""


class TooManyPoints(SlidekitError):
    """Exact t-SNE is capped at 20,000 points."""


class ShapeMismatch(SlidekitError):
    """Tensor shape inconsistent with the encoder configuration."""


class DimensionMismatch(SlidekitError):
    """Feature dimensions disagree between datasets or weights."""


class InvalidSpec(SlidekitError):
    """Cohort specification violates its invariants."""


class DataError(SlidekitError):
    """Malformed input file; message names the file and offset when known."""
