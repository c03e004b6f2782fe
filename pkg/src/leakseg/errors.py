"""Error taxonomy shared by the library and the CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration: bad key, bad value, violated constraint."""

    exit_code = 2


class DataError(RuntimeError):
    """Dataset problems: missing files, count mismatches, undecodable images."""

    exit_code = 3


class NumericError(RuntimeError):
    """Non-finite losses or other numerical failures during training."""

    exit_code = 4


IO_EXIT_CODE = 5
