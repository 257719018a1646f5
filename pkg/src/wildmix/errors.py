"""Exception hierarchy shared across the package."""


class WildmixError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(WildmixError, ValueError):
    pass


class ShapeError(WildmixError, ValueError):
    pass


class WavFormatError(WildmixError, ValueError):
    """Malformed RIFF/WAVE container."""


class UnsupportedCodecError(WavFormatError):
    pass


class EmptyClipError(WildmixError, ValueError):
    pass


class InsufficientCorpusError(WildmixError):
    """The corpus cannot satisfy a sampling policy's precondition."""


class OversizeClipError(WildmixError, ValueError):
    pass


class NonInvertibleError(WildmixError):
    """STFT window overlap leaves samples that cannot be reconstructed."""


class ContractError(WildmixError, RuntimeError):
    pass


class DoubleBackwardError(ContractError):
    pass


class NumericError(WildmixError, FloatingPointError):
    pass


class DivergedRunError(WildmixError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last checkpoint whose loss was finite.
    """

    def __init__(self, message, checkpoint=None, log=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


class IncompatibleCheckpointError(WildmixError):
    pass


class EmptyDatasetError(WildmixError):
    pass


class SampleRateError(WildmixError, ValueError):
    pass
