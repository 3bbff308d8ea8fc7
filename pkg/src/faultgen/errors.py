"""Exception hierarchy shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """An operation produced a non-finite value."""


class ForwardError(NumericError):
    """A model layer produced a non-finite activation; message names the layer."""


class SamplingError(NumericError):
    """Reverse diffusion produced a non-finite state; message names the step."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite; message names the step."""


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, corrupt, or incompatible."""


class CorpusError(RuntimeError):
    """Corpus directory is malformed; message names the offending file."""


class MetricError(RuntimeError):
    """A metric could not be computed on the given corpora."""


class ConfigError(ValueError):
    """Run configuration is invalid (unknown key, bad value, bad override)."""
