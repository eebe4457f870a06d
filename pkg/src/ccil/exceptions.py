"""Exception hierarchy shared by every stage of the pipeline."""


class CCILError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(CCILError, ValueError):
    """Bad shapes, unknown identifiers, or invalid hyperparameters."""


class InputError(CCILError, ValueError):
    """Malformed or inconsistent input data."""


class TrainingError(CCILError, RuntimeError):
    """Optimisation diverged or produced non-finite parameters."""


class EnvironmentMisconfigured(CCILError, RuntimeError):
    """A scripted expert fails too often to collect demonstrations."""
