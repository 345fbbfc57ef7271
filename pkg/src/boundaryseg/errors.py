"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its contract."""


class InvalidConfigError(ValueError):
    """A configuration object or argument combination is unsupported."""


class GradientStateError(RuntimeError):
    """Backward-pass bookkeeping was used incorrectly (double backward,
    stale gradients, missing gradients)."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss term."""


class VolumeFormatError(ValueError):
    """Base class for MVOL container parse failures."""


class MagicMismatchError(VolumeFormatError):
    """File does not start with the MVOL magic string."""


class TruncatedVolumeError(VolumeFormatError):
    """Payload is shorter than the header promises."""


class PayloadSizeMismatchError(VolumeFormatError):
    """Payload length disagrees with the header dims (too long)."""


class CheckpointFormatError(ValueError):
    """Checkpoint container is malformed."""


class ConfigHashMismatchError(ValueError):
    """Checkpoint was produced under a different configuration."""


class PhantomGeometryError(InvalidConfigError):
    """Phantom shapes do not satisfy the geometric invariants."""
