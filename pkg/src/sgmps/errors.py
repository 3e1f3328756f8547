"""Exception hierarchy. Every error carries a stable machine-readable ``code``."""


class SgmpsError(Exception):
    code = "error"


class InvalidInput(SgmpsError, ValueError):
    code = "invalid_input"


class DimMismatch(InvalidInput):
    code = "dim_mismatch"


class KernelMeetsStates(SgmpsError):
    """A transfer map (or its adjoint) annihilated a density matrix."""

    code = "kernel_meets_states"


class NoConvergence(SgmpsError):
    code = "no_convergence"


class DegenerateChain(SgmpsError):
    code = "degenerate_chain"


class SingularGauge(SgmpsError):
    code = "singular_gauge"


class CalibrationFailed(SgmpsError):
    code = "calibration_failed"


class RegimeMismatch(SgmpsError):
    code = "regime_mismatch"


class MissingProfile(SgmpsError):
    code = "missing_profile"


class ConfigError(SgmpsError):
    code = "config_error"

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"
