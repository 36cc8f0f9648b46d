"""Exception types shared across the package."""


class FrptError(Exception):
    """Base class for all frpt errors."""


class ShapeMismatch(FrptError):
    """Operands have incompatible shapes."""


class NotPositiveDefinite(FrptError):
    """A matrix required to be (Hermitian) positive definite is not.

    ``index`` identifies the offending matrix in a batched call, or is
    None for a single-matrix call.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class RankDeficient(FrptError):
    """A least-squares matrix lost full column rank."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class RankDeficientFrequency(FrptError):
    """The per-frequency kernel matrix is singular beyond tolerance."""

    def __init__(self, u, v, message=None):
        super().__init__(message or f"singular kernel spectrum at frequency ({u}, {v})")
        self.u = u
        self.v = v


class LabelOutOfRange(FrptError):
    """A class label falls outside [0, class_count)."""


class MissingReconTargets(FrptError):
    """Reconstruction targets are required when the reconstruction loss is active."""


class ConfigMismatch(FrptError):
    """A configuration is inconsistent with a supplied artifact."""


class ReconstructionError(FrptError):
    """A solver failed inside the backward reconstruction chain."""

    def __init__(self, unit, cause, instance_range=None):
        detail = f" (instances {instance_range[0]}..{instance_range[1]})" if instance_range else ""
        super().__init__(f"reconstruction failed at unit {unit}{detail}: {cause}")
        self.unit = unit
        self.cause = cause
        self.instance_range = instance_range


class BadMagic(FrptError):
    """A binary file does not start with the expected magic bytes."""


class CountMismatch(FrptError):
    """Paired files disagree on the number of instances."""


class TruncatedFile(FrptError):
    """A binary file ends before its declared payload."""
