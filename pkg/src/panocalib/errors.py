"""Exception hierarchy shared by every stage of the calibration pipeline."""


class CalibrationError(Exception):
    """Base class for all pipeline errors."""


class FrameMismatch(CalibrationError):
    pass


class BehindCamera(CalibrationError):
    pass


class DegenerateConfiguration(CalibrationError):
    pass


# camloc uses this name for collinear detection sets
DegenerateInput = DegenerateConfiguration


class NoSolution(CalibrationError):
    pass


class EpipolarViolation(CalibrationError):
    pass


class DivergentRays(CalibrationError):
    pass


class SingularInput(CalibrationError):
    pass


class GimbalLockWarning(UserWarning):
    """Euler decomposition hit the |ry| = 90 deg singularity; rz was set to 0."""


class PackingFailure(CalibrationError):
    pass


class InsufficientVisibility(CalibrationError):
    pass


class NoConsensus(CalibrationError):
    pass


class TrackingLost(CalibrationError):
    def __init__(self, frame: int, message: str = ""):
        self.frame = frame
        super().__init__(message or f"tracking lost at frame {frame}")


class NotConverged(CalibrationError):
    pass


class AlignmentFailure(CalibrationError):
    pass


class LocalizationFailure(CalibrationError):
    def __init__(self, message: str, sensor: str | None = None):
        self.sensor = sensor
        super().__init__(message if sensor is None else f"{sensor}: {message}")


class NoPlanes(CalibrationError):
    pass


class NearParallelPlanes(CalibrationError):
    pass


class ImproperRotation(CalibrationError):
    pass


class IcpDiverged(CalibrationError):
    pass


class UnknownSensor(CalibrationError):
    pass


class ConfigError(CalibrationError):
    pass


class DataFileError(CalibrationError, OSError):
    """A data file is missing or malformed; carries the path and line."""

    def __init__(self, path, message: str, line: int | None = None):
        self.path = str(path)
        self.line = line
        where = self.path if line is None else f"{self.path}:{line}"
        super().__init__(f"{where}: {message}")
