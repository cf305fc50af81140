"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class AsmlmError(Exception):
    """Base class for all toolkit errors."""


class UsageError(AsmlmError):
    pass


class DataError(AsmlmError):
    pass


class NumericError(AsmlmError):
    pass


# -- corpus ------------------------------------------------------------

class MalformedRecord(DataError):
    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DanglingReference(DataError):
    pass


class EmptyCorpus(DataError):
    pass


# -- tokenizer ---------------------------------------------------------

class UnparsableInstruction(DataError):
    def __init__(self, text, reason=""):
        msg = f"cannot tokenize {text!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.text = text


# -- sampler -----------------------------------------------------------

class InsufficientCorpus(DataError):
    pass


class NoDefUseEdges(DataError):
    pass


class SequenceTooLong(DataError):
    pass


# -- model / trainer ---------------------------------------------------

class InvalidConfig(UsageError):
    pass


class ShapeMismatch(DataError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, step, last_checkpoint=None):
        msg = f"non-finite loss at step {step}"
        if last_checkpoint:
            msg += f" (last good checkpoint: {last_checkpoint})"
        super().__init__(msg)
        self.step = step
        self.last_checkpoint = last_checkpoint


class StreamExhausted(DataError):
    pass


# -- evalkit -----------------------------------------------------------

class UnlistedOpcode(DataError):
    pass


class UnlistedPattern(DataError):
    pass


class InsufficientCategories(DataError):
    pass


class DegenerateLabels(DataError):
    pass
