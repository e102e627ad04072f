"""Exception hierarchy shared by the package.

Every class carries an ``exit_code`` so the command line can map failures to a
machine-readable category without string matching.
"""


class NmmError(Exception):
    exit_code = 1
    category = "error"


class ConfigurationError(NmmError, ValueError):
    exit_code = 2
    category = "config"


class NumericalError(NmmError, ArithmeticError):
    exit_code = 4
    category = "numeric"


class IntegrationDivergence(NumericalError):
    """Euler step produced a non-finite value."""

    def __init__(self, message, channel=None, step=None):
        super().__init__(message)
        self.channel = channel
        self.step = step


class FilterDivergence(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegenerateSampleError(NmmError, ValueError):
    exit_code = 5
    category = "degenerate"


class SampleSizeError(NmmError, ValueError):
    exit_code = 5
    category = "sample-size"


class IngestError(NmmError, IOError):
    exit_code = 3
    category = "ingest"


class MalformedHeaderError(IngestError):
    exit_code = 10
    category = "ingest-malformed-header"


class MissingChannelError(IngestError):
    exit_code = 11
    category = "ingest-missing-channel"


class EmptyFileError(IngestError):
    exit_code = 12
    category = "ingest-empty-file"


class FormatVersionError(NmmError, ValueError):
    exit_code = 6
    category = "format-version"
