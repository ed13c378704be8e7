"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A caller broke a documented precondition (e.g. non-scalar gradcheck)."""


class ProtocolError(ValueError):
    """Volume geometry is incompatible with the slice sampling protocol."""


class ConfigError(ValueError):
    """Experiment configuration is inconsistent or incompatible."""


class StateError(RuntimeError):
    """Training state is missing or inconsistent (e.g. no stage-1 checkpoint)."""


class VerificationError(AssertionError):
    """A numerical verification exceeded its tolerance."""
