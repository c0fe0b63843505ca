"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class JMVRError(Exception):
    exit_code = 1


class ConfigError(JMVRError, ValueError):
    exit_code = 2


class DataError(JMVRError, ValueError):
    exit_code = 3


class NumericError(JMVRError, FloatingPointError):
    exit_code = 4


class ProviderError(JMVRError, RuntimeError):
    """A plug-in provider (depth, text, features) failed on its input."""

    exit_code = 3

    def __init__(self, provider: str, message: str):
        super().__init__(f"provider {provider!r} failed: {message}")
        self.provider = provider
