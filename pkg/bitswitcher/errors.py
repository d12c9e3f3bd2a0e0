"""
Error types raised by the BitSwitcher library.

Every error derives from BitSwitcherError so the command line can turn any of
them into a one-line diagnostic and a nonzero exit code.
"""


class BitSwitcherError(Exception):
    """Base class for all library errors."""


class DimensionError(BitSwitcherError):
    """Tensor shapes or config lengths do not match."""


class DomainError(BitSwitcherError):
    """An argument lies outside its valid domain (bit-width, step size, index...)."""


class PreconditionError(BitSwitcherError):
    """An operation was called in a state where it is not defined."""


class NumericalError(BitSwitcherError):
    """A tensor holds NaN or Inf."""


class DivergenceError(NumericalError):
    """A training loss became non-finite."""


class CorruptionError(BitSwitcherError):
    """
    A checkpoint manifest and its blob disagree.

    Args:
        tensor_name (str): Name of the offending tensor.
        message (str): What is wrong with it.
    """

    def __init__(self, tensor_name: str, message: str):
        super().__init__(f"corrupt checkpoint tensor '{tensor_name}': {message}")
        self.tensor_name = tensor_name


class FormatError(BitSwitcherError):
    """A data file does not follow the expected format."""


class LengthError(FormatError):
    """A data file is shorter than its header promises."""


class ConsistencyError(BitSwitcherError):
    """Two inputs that must agree (e.g. image and label files) do not."""


class ConfigError(BitSwitcherError):
    """Malformed, unknown or missing configuration."""


class ConfigSpaceError(BitSwitcherError):
    """
    The number of bit-width configurations exceeds the allowed cap.

    Args:
        count (int): Size of the configuration space.
        cap (int): The cap that was exceeded.
    """

    def __init__(self, count: int, cap: int):
        super().__init__(f"configuration space has {count} configs, exceeding cap {cap}")
        self.count = count
        self.cap = cap


class JobError(BitSwitcherError):
    """
    One or more queued experiment jobs failed.

    Args:
        failed (dict): Error message by job name.
    """

    def __init__(self, failed: dict):
        names = ", ".join(sorted(failed))
        super().__init__(f"{len(failed)} job(s) failed: {names}")
        self.failed = dict(failed)
