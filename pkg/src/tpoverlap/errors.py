"""Exception hierarchy shared by every module."""


class OverlapError(Exception):
    """Base class for errors raised by tpoverlap."""


class ConfigError(OverlapError, ValueError):
    """Invalid problem, tile, knob or run configuration."""


class ShapeError(OverlapError, ValueError):
    """A buffer does not have the shape the problem requires."""


class DirectoryError(OverlapError, LookupError):
    """A rank is missing from the peer buffer directory."""


class BoundsError(OverlapError, IndexError):
    """An index or row range falls outside its buffer or grid."""


class DeadlockError(OverlapError, RuntimeError):
    """A signal wait exhausted its polling budget."""


class TuneError(OverlapError, RuntimeError):
    """A tuning candidate failed its correctness check."""

    def __init__(self, message, config=None):
        super().__init__(message)
        self.config = config


class SignalError(OverlapError, RuntimeError):
    """A readiness flag was set twice within one run."""
