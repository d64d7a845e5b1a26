"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Input violates a documented precondition (shape, symmetry, finiteness)."""


class DegenerateInputError(ValueError):
    """Input is technically valid but carries no usable information (e.g. all-zero matrix)."""


class ConfigError(ValueError):
    """Bad configuration value or unknown name."""


class IntegrationDivergedError(RuntimeError):
    """The integrated vector field produced a non-finite value."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} (t={time:g})")
        self.time = time


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class DegenerateFitError(ValueError):
    """Samples carry no spread; a distribution fit is impossible."""


class FitFailedError(RuntimeError):
    """Maximum-likelihood estimation did not converge."""


class CertificationRefusedError(RuntimeError):
    """The goodness-of-fit test rejected the extreme-value fit; no certificate issued."""

    def __init__(self, message: str, ks_statistic: float, ks_p_value: float):
        super().__init__(message)
        self.ks_statistic = ks_statistic
        self.ks_p_value = ks_p_value


class VerificationFailedError(RuntimeError):
    """Contraction could not be certified over the requested domain."""


class DomainConstructionFailedError(RuntimeError):
    """No trusted-domain radius admits a contraction certificate."""


class PropagationDivergedError(RuntimeError):
    """Tube propagation produced a non-finite energy."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} (t={time:g})")
        self.time = time


class ControllerFailureError(RuntimeError):
    """Feedback synthesis hit a degenerate constraint (zero effective input direction)."""


class UnsupportedPrimitiveError(TypeError):
    """An operation outside the supported differentiable primitive set was requested."""


class MissingArtifactError(RuntimeError):
    """A pipeline stage requires an artifact that an earlier stage has not produced."""

    def __init__(self, stage: str, path: str):
        super().__init__(f"stage '{stage}' requires missing artifact: {path}")
        self.stage = stage
        self.path = path
