"""Exception types shared across the package."""


class AdvMaskError(Exception):
    """Base class for errors raised by this package."""


class MalformedInputError(AdvMaskError, ValueError):
    """Input image data violates the expected layout or value range."""


class ShapeMismatchError(AdvMaskError, ValueError):
    """Two arrays/tensors that must agree in shape do not."""


class ProtocolInfeasibleError(AdvMaskError, RuntimeError):
    """The dataset cannot support the requested comparison protocol."""


class TrainingFailedError(AdvMaskError, RuntimeError):
    """Training aborted: divergence, NaN losses, or no improvement."""


class CheckpointMismatchError(AdvMaskError, RuntimeError):
    """A checkpoint's architecture fingerprint does not match the model."""


class NotDifferentiableError(AdvMaskError, RuntimeError):
    """An operation requiring gradients was given a black-box matcher."""
