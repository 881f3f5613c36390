"""Exception hierarchy.

Every error carries an exit code class so the CLI can map failures onto its
documented exit codes: 2 config, 3 data, 4 numerical.
"""

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class AnnoflowError(Exception):
    exit_code = EXIT_CONFIG


class ConfigError(AnnoflowError):
    """Invalid configuration value or inconsistent option combination."""

    exit_code = EXIT_CONFIG


class ShapeError(AnnoflowError):
    """Array shape does not match what an operation requires."""

    exit_code = EXIT_CONFIG


class OptimizerError(AnnoflowError):
    """Optimizer state and gradient set disagree."""

    exit_code = EXIT_CONFIG


class NumericalError(AnnoflowError):
    """Non-finite values where finite ones are required."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message, layer=None, dim=None, probe=None):
        if layer is not None:
            message = f"{message} (layer {layer})"
        if dim is not None:
            where = f"dim {dim}" if probe is None else f"dim {dim}, v={probe}"
            message = f"{message} ({where})"
        super().__init__(message)
        self.layer = layer
        self.dim = dim
        self.probe = probe


class DivergenceError(NumericalError):
    """Training produced a non-finite validation loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class ParseError(AnnoflowError):
    """Malformed input file."""

    exit_code = EXIT_DATA

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(ParseError):
    """Record violates the label schema."""

    def __init__(self, message, line=None, dim=None):
        if dim is not None:
            message = f"dim {dim!r}: {message}"
        super().__init__(message, line=line)
        self.dim = dim


class JoinError(AnnoflowError):
    """Annotation references a text with no embedding."""

    exit_code = EXIT_DATA

    def __init__(self, message, text_id=None):
        if text_id is not None:
            message = f"text {text_id!r}: {message}"
        super().__init__(message)
        self.text_id = text_id


class EmptyBatchError(AnnoflowError):
    exit_code = EXIT_CONFIG


class EmptyInputError(AnnoflowError):
    exit_code = EXIT_CONFIG


class DegenerateVarianceError(AnnoflowError):
    """A quantity whose variance must be positive is constant."""

    exit_code = EXIT_DATA
