"""Exception hierarchy shared across the package.

Validation problems (bad shapes, malformed files, contaminated splits) derive
from ``ValidationError``; the CLI maps those to exit code 1 and ``OSError`` to 2.
"""


class KPReIDError(Exception):
    pass


class ValidationError(KPReIDError, ValueError):
    pass


class DimensionError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class EvaluationError(KPReIDError, ArithmeticError):
    pass


class FormatError(ValidationError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SplitContaminationError(ValidationError):
    pass


class DuplicateImageError(ValidationError):
    pass


class BoundsError(ValidationError):
    pass


class CategoryError(ValidationError):
    pass


class GenerationError(ValidationError):
    pass


class CheckpointIncompatibleError(ValidationError):
    pass


class MissingFeatureError(KPReIDError, FileNotFoundError):
    pass


class UnknownImageError(ValidationError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ProtocolError(ValidationError):
    pass


class LabelError(ValidationError):
    pass


class TripletMiningError(ValidationError):
    pass


class NumericError(KPReIDError, ArithmeticError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index
