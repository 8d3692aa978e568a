"""Exception types shared across the package."""


class InvalidShapeError(ValueError):
    pass


class InvalidArgumentError(ValueError):
    pass


class NoGraphError(RuntimeError):
    """Raised when backward is requested for a tensor that is not on the active tape."""


class NumericInstabilityError(ArithmeticError):
    pass


class ConfigError(ValueError):
    pass


class InvalidLabelError(ValueError):
    pass


class ManifestFormatError(ValueError):
    pass


class SplitError(ValueError):
    pass


class UndefinedAUCError(ValueError):
    """AUC needs at least one positive and one negative label."""


class BootstrapError(RuntimeError):
    pass
