class DttBsrError(Exception):
    """Base exception for restoration pipeline errors."""

    exit_code: int = 1

    def __init__(self, detail: str = "Restoration pipeline error"):
        super().__init__(detail)
        self.detail = detail


class AudioFormatError(DttBsrError):
    """Malformed RIFF/WAVE header."""

    def __init__(self, detail: str = "Malformed WAV header"):
        super().__init__(detail)


class UnsupportedFormatError(DttBsrError):
    """Codec or bit depth that the WAV reader does not handle."""

    def __init__(self, detail: str = "Unsupported audio encoding"):
        super().__init__(detail)


class CorruptFileError(DttBsrError):
    """Data chunk shorter than the header announces."""

    def __init__(self, detail: str = "Truncated or corrupt audio file"):
        super().__init__(detail)


class EmptyInputError(DttBsrError):
    def __init__(self, detail: str = "Input signal is empty"):
        super().__init__(detail)


class ArgumentError(DttBsrError, ValueError):
    """Invalid argument value (range, sign, length)."""

    def __init__(self, detail: str = "Invalid argument"):
        super().__init__(detail)


class ConfigError(DttBsrError):
    """Invalid or inconsistent configuration."""

    exit_code = 2

    def __init__(self, detail: str = "Invalid configuration"):
        super().__init__(detail)


class ShapeError(DttBsrError, ValueError):
    def __init__(self, detail: str = "Tensor shape mismatch"):
        super().__init__(detail)


class DegenerateWindowError(DttBsrError):
    def __init__(self, detail: str = "Window overlap-add denominator is zero"):
        super().__init__(detail)


class LengthError(DttBsrError, ValueError):
    def __init__(self, detail: str = "Input is too short"):
        super().__init__(detail)


class CorruptCheckpointError(DttBsrError):
    def __init__(self, detail: str = "Checkpoint checksum mismatch"):
        super().__init__(detail)


class CheckpointVersionError(DttBsrError):
    def __init__(self, detail: str = "Unknown checkpoint format version"):
        super().__init__(detail)


class ConfigMismatchError(DttBsrError):
    def __init__(self, detail: str = "Checkpoint config does not match"):
        super().__init__(detail)


class EmptyDatasetError(DttBsrError):
    exit_code = 2

    def __init__(self, detail: str = "No usable songs in dataset"):
        super().__init__(detail)


class NonFiniteLossError(DttBsrError):
    def __init__(self, detail: str = "Loss became non-finite"):
        super().__init__(detail)
