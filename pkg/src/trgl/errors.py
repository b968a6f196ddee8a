"""Exception types shared across the package."""


class TrglError(Exception):
    pass


class DimensionError(TrglError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        listed = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class ContractError(TrglError, RuntimeError):
    """A caller broke a precondition (non-scalar backward, missing grad, ...)."""


class ConfigError(TrglError, ValueError):
    pass


class DataError(TrglError, ValueError):
    pass


class FormatError(DataError):
    """Malformed binary or text input."""


class UnsupportedCaseError(TrglError, ValueError):
    pass


class NumericalError(TrglError, FloatingPointError):
    def __init__(self, message: str, module: int | None = None, epoch: int | None = None):
        self.module = module
        self.epoch = epoch
        where = f" (module {module}, epoch {epoch})" if module is not None else ""
        super().__init__(message + where)
