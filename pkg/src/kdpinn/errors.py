class KdPinnError(Exception):
    pass


class ConfigError(KdPinnError, ValueError):
    """Invalid recipe, config key, or parameter value."""


class DivergenceError(KdPinnError, FloatingPointError):
    """A loss or gradient became non-finite.

    ``net`` and ``history`` carry the best finite checkpoint and the records
    logged before the failure, when the raiser has them.
    """

    def __init__(self, message, net=None, history=None):
        super().__init__(message)
        self.net = net
        self.history = history


class EnvironmentRefused(KdPinnError, RuntimeError):
    """The benchmark harness cannot guarantee its measurement conditions."""


class ChecksumError(KdPinnError, ValueError):
    pass
