"""Exception types mapped to CLI exit codes (usage=2, data=3, numerical=4)."""


class ConfigError(Exception):
    """Bad configuration: unknown keys, invalid values, malformed JSON."""


class DataError(Exception):
    """Unreadable, inconsistent or missing data on disk."""


class NumericalError(Exception):
    """Non-finite values where finiteness is required (e.g. diverged loss)."""
