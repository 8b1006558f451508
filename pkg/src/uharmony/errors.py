"""Exception taxonomy shared by all modules.

CLI exit codes are derived from these classes: configuration problems exit
with 2, numerical aborts with 3, verification failures with 4.
"""


class ConfigurationError(ValueError):
    """Inconsistent shapes, unknown ids, bad config files or flag values."""


class InputError(ValueError):
    """Invalid payload data, e.g. non-finite feature values."""


class DataError(ValueError):
    """A sample contradicts its domain contract (e.g. label outside the label set)."""


class StateError(RuntimeError):
    """Operation invoked in the wrong lifecycle state (e.g. unfinalized prototypes)."""


class PairingError(RuntimeError):
    """Encoder/decoder statistics pairing discipline was violated."""


class NumericalAbort(RuntimeError):
    """Non-finite loss or gradient; training cannot continue."""


class VerificationError(RuntimeError):
    """A gradient check or another self-verification failed."""
