"""Exception hierarchy shared by the simulator modules and the CLI"""

from typing import Optional


class PolishSimError(Exception):
    """Base class for all simulator errors"""


class InvalidBoxError(PolishSimError, ValueError):
    """Box with non-positive extent or non-finite coordinates"""


class ShapeMismatchError(PolishSimError, ValueError):
    """Arrays whose shapes do not chain (network layers, optimizer buffers, EMA pairs)"""


class SamplingError(PolishSimError):
    """Random box synthesis could not produce a valid box"""


class ConfigError(PolishSimError):
    """Configuration could not be parsed or failed validation"""


class StorageError(PolishSimError):
    """Reading or writing an artifact failed"""


class DivergenceError(PolishSimError):
    """A loss or gradient became non-finite"""

    def __init__(self, message: str, iteration: Optional[int] = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class UsageError(PolishSimError):
    """Command-line arguments or run directory contents do not allow the command to run"""
