"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameter record or run configuration."""


class SensorError(RuntimeError):
    """Physically impossible sensing request (e.g. sensor below terrain)."""


class PointCloudParseError(ValueError):
    """Malformed point-cloud text; carries the 1-based line number."""

    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class NoFeasibleTimeError(RuntimeError):
    """Time-of-flight bisection bracket contains no feasible node count."""


class TargetInfeasibleError(RuntimeError):
    """A requested landing target admits no feasible trajectory."""

    def __init__(self, target_id: int, message: str = ""):
        self.target_id = target_id
        super().__init__(message or f"target {target_id} is infeasible")


class ControlRangeError(KeyError):
    """Requested control interval is not covered by the stored control table."""


class DdtoProbeError(RuntimeError):
    """A deferral feasibility probe failed for a non-infeasibility reason."""


class GuidanceAbort(RuntimeError):
    """Guidance loop gave up; `reason` is a short machine-readable tag."""

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason
        super().__init__(message or reason)
