from typing import Optional, Tuple


class MSDError(Exception):
    """Base class for every error raised by the sampler."""


class ConfigError(MSDError, ValueError):
    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ContractError(MSDError, ValueError):
    pass


class CoverageError(ContractError):
    def __init__(self, pixel: Tuple[int, int], level: Optional[int] = None):
        self.pixel = pixel
        self.level = level
        where = f" at level {level}" if level is not None else ""
        super().__init__(f"zero weight sum at pixel (row={pixel[0]}, col={pixel[1]}){where}")


class NumericalError(MSDError, RuntimeError):
    def __init__(self, level: int, timestep: int, detail: str = "non-finite values"):
        self.level = level
        self.timestep = timestep
        super().__init__(f"{detail} in canvas at level {level}, timestep {timestep}")
