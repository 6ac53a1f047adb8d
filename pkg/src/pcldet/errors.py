"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, out-of-range options, missing streams."""


class DataError(ValueError):
    """Invalid input data, e.g. a training image violating preconditions."""


class DatasetFormatError(ValueError):
    """Malformed or unsupported dataset/detections file."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its geometric constraints."""
