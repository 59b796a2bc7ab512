"""Exception hierarchy shared by all mortseq modules."""


class MortseqError(Exception):
    """Base class for every error raised by this package."""


class MalformedCode(MortseqError, ValueError):
    pass


class UnmappedCode(MortseqError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unmapped code"


class InvalidTable(MortseqError, ValueError):
    pass


class MalformedRecord(MortseqError, ValueError):
    pass


class EmptyResult(MortseqError):
    pass


class InvalidSpec(MortseqError, ValueError):
    pass


class UnsupportedOrder(MortseqError, ValueError):
    pass


class DimensionMismatch(MortseqError, ValueError):
    pass


class EmptyShard(MortseqError):
    pass


class ShapeMismatch(MortseqError, ValueError):
    pass


class NonFiniteActivation(MortseqError, FloatingPointError):
    pass


class EmptySequence(MortseqError, ValueError):
    pass


class SequenceTooLong(MortseqError, ValueError):
    pass


class MissingCache(MortseqError, RuntimeError):
    pass


class DivergenceDetected(MortseqError, FloatingPointError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class CalibrationFailure(MortseqError):
    pass


class NonFiniteEmbedding(MortseqError, FloatingPointError):
    pass


class CheckFailed(MortseqError):
    def __init__(self, tensors, errors):
        names = ", ".join(tensors)
        super().__init__(f"gradient check failed for: {names}")
        self.tensors = list(tensors)
        self.errors = dict(errors)


class ModelFormatError(MortseqError, TypeError):
    pass
