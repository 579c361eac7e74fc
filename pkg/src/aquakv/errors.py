"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so new error conditions should
reuse an existing class (or subclass one) rather than raising bare ValueError
for anything a user can trigger from the command line.
"""


class AquaKVError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AquaKVError, ValueError):
    """Invalid configuration value or inconsistent option combination."""


class SingularSystemError(AquaKVError):
    """Normal equations are singular; refit with a positive ridge penalty."""


class DegenerateTargetError(AquaKVError):
    """Explained-variance target has zero variance in every channel."""


class FormatError(AquaKVError):
    """Malformed binary payload (bad magic, bad version, corrupt structure)."""


class ChecksumError(FormatError):
    """File content does not match its trailing checksum."""


class TruncatedTraceError(FormatError):
    """Trace file ends before the payload it promises.

    Carries the first layer index whose payload is incomplete.
    """

    def __init__(self, layer: int, message: str | None = None):
        self.layer = layer
        super().__init__(message or f"truncated payload at layer {layer}")


class GeometryError(AquaKVError):
    """Tensor shapes or model geometry do not match the expected layout."""


class IncompatiblePredictorsError(GeometryError):
    """Predictor set geometry does not match the target trace or cache."""


class ContractViolationError(AquaKVError):
    """API used outside its documented calling contract."""
