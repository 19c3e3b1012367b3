"""Exception hierarchy shared by every stage of the pipeline."""


class AdEnsembleError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AdEnsembleError, ValueError):
    pass


class DegenerateBatchError(AdEnsembleError, ValueError):
    pass


class LabelError(AdEnsembleError, ValueError):
    pass


class GradientError(AdEnsembleError, ArithmeticError):
    pass


class TransferError(AdEnsembleError, ValueError):
    pass


class NotFoundError(AdEnsembleError, KeyError):
    def __str__(self):
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(AdEnsembleError, ValueError):
    pass


class IngestionError(AdEnsembleError, OSError):
    pass


class DataError(AdEnsembleError, ValueError):
    pass


class SplitError(AdEnsembleError, ValueError):
    pass


class SmoteError(AdEnsembleError, ValueError):
    pass


class TrainingError(AdEnsembleError, RuntimeError):
    pass


class CheckpointError(AdEnsembleError, OSError):
    pass


class EnsembleError(AdEnsembleError, ValueError):
    pass


class EvaluationError(AdEnsembleError, ValueError):
    pass


class DegenerateTestError(EvaluationError):
    pass
