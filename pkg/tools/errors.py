"""Error hierarchy for the Deep-Mobility handover lab.

Library modules raise these; only the entry script (run_lab.py) turns
them into process exit codes.
"""


class LabError(Exception):
    """Base class.  ``exit_code`` is what run_lab.py exits with."""

    exit_code = 1


class UsageError(LabError):
    exit_code = 2


class ConfigError(LabError):
    """Bad or inconsistent configuration, detected at load time."""

    exit_code = 3


class DataError(LabError):
    """Malformed, empty or out-of-range dataset / model input."""

    exit_code = 4


class NumericError(LabError):
    """Non-finite loss or parameters during training."""

    exit_code = 5
