"""Exception hierarchy shared by every cfcl module."""


class CFCLError(Exception):
    """Base class for all simulator errors."""


class ShapeError(CFCLError, ValueError):
    """Input or embedding dimension does not match the model."""


class InfeasibleKError(CFCLError, ValueError):
    """Requested more clusters or samples than there are points."""


class DataError(CFCLError, ValueError):
    """Non-finite values, empty datasets or malformed files."""


class IDXFormatError(DataError):
    pass


class EmptyCandidateError(CFCLError):
    """No candidate carries positive sampling mass."""


class DegenerateGeometryError(CFCLError):
    """Cluster centroids coincide so a distance ratio is undefined."""


class ConfigError(CFCLError, ValueError):
    """Invalid simulation configuration; the message names the key."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class TopologyError(CFCLError):
    pass


class InsufficientDataError(CFCLError):
    pass


class ProbeInfeasibleError(CFCLError):
    pass


class RunError(CFCLError):
    """Wraps any failure inside the run loop with its (t, device, phase)."""

    def __init__(self, t, device, phase, cause):
        self.t = t
        self.device = device
        self.phase = phase
        self.cause = cause
        super().__init__(f"run failed at t={t}, device={device}, phase={phase}: {cause!r}")
