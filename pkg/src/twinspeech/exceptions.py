"""Exception hierarchy shared by every module of the package."""


class TwinSpeechError(Exception):
    """Base class for all package errors."""

    #: process exit code used by the command-line interface
    exit_code = 1


class InvalidAudio(TwinSpeechError, ValueError):
    pass


class InvalidInput(TwinSpeechError, ValueError):
    pass


class InvalidPolicy(TwinSpeechError, ValueError):
    pass


class ShapeError(TwinSpeechError, ValueError):
    pass


class NumericError(TwinSpeechError, ArithmeticError):
    exit_code = 2


class ConfigError(TwinSpeechError, ValueError):
    pass


class CacheError(TwinSpeechError, RuntimeError):
    pass


class DataError(TwinSpeechError, IOError):
    pass


class SubsampleError(DataError):
    pass


class FormatError(TwinSpeechError, ValueError):
    pass


class VersionError(FormatError):
    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(
            f"unsupported format version {found} (this build reads version {expected})"
        )


class VerificationError(TwinSpeechError, AssertionError):
    exit_code = 3
