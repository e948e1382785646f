"""Exception types shared across the package."""


class NumericError(ArithmeticError):
    """A formula was evaluated outside its numeric domain."""


class SchemaError(ValueError):
    """Input data or a serialized document does not match the expected schema."""


class CalibrationError(ValueError):
    """No noise parameters satisfy the requested privacy budget."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


class ProtocolError(RuntimeError):
    """A party received a message out of order or for an unknown node."""
