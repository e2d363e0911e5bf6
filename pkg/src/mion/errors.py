"""Exception types shared across the pipeline."""


class MionError(Exception):
    """Base class for all library errors."""


class SingularSystem(MionError):
    """Linear system is rank deficient (|det| below threshold)."""


class DegenerateCloud(MionError):
    """Point cloud has zero variance; alignment is undefined."""


class DegenerateAxis(MionError):
    """A coordinate axis has zero extent; normalization is undefined."""


class InvalidDims(MionError):
    """Requested dimensions violate construction preconditions."""


class BehindCamera(MionError):
    """A point has non-positive camera-space depth."""


class InvalidK(MionError):
    """Cluster count incompatible with the data."""


class EmptyPool(MionError):
    """Candidate pool has no members to select from."""


class ShapeMismatch(MionError):
    """Tensor or array shapes are incompatible for the operation."""


class OddDim(MionError):
    """An encoding dimension that must be even is odd."""


class EmptyDataset(MionError):
    """Training requires at least one sample."""


class TooFewCandidates(MionError):
    """Pair synthesis needs at least two candidates."""


class EmptyList(MionError):
    """A nonempty sequence was required."""


class NoAdmissibleCandidate(MionError):
    """Inference could not produce any optimization branch."""


class ArtifactFormatError(MionError):
    """A serialized artifact has a bad magic, version, or layout."""
