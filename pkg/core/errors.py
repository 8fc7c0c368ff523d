"""
Error hierarchy for the DualVC toolkit
Library code raises these; main.py maps them to exit codes
"""


class DualVCError(Exception):
    """Base class for every error raised by this package"""


class ShapeError(DualVCError, ValueError):
    """Tensor shapes or lengths do not agree"""


class NonFiniteError(DualVCError, ArithmeticError):
    """NaN or infinity found in logits, losses or gradients"""


class VocabularyError(DualVCError, ValueError):
    """Token id outside the configured vocabulary"""


class FormatError(DualVCError):
    """Binary container has a bad magic, version or is truncated"""


class ConfigError(DualVCError, ValueError):
    """Unknown key or uncoercible value in a run configuration"""


class SessionClosedError(DualVCError):
    """Audio pushed to a stream session after flush()"""


class EmptyCorpusError(DualVCError, ValueError):
    """Training was asked to run on no data"""


class MissingModelError(DualVCError, FileNotFoundError):
    """A command needs a checkpoint that has not been trained yet"""
