"""
Exceptions raised by absorb.
"""

class AbsorbError(Exception):
    """ Base class for absorb errors. """
    # Reverse-sampling step at which the error was raised, if any
    step = None

class ConfigurationError(AbsorbError, ValueError):
    """ Incompatible shapes, dimensions, or artifacts. """
    pass

class UsageError(ConfigurationError):
    """ Missing or malformed command-line input. """
    pass

class InvalidInputError(AbsorbError, ValueError):
    pass

class RangeError(InvalidInputError):
    pass

class FormatError(AbsorbError, IOError):
    """ Malformed file; the message names the offending field. """
    pass

class DegenerateDataError(AbsorbError, ValueError):
    pass

class SingularityError(AbsorbError, ZeroDivisionError):
    pass

class ModelOutputError(AbsorbError, ValueError):
    """ Invalid probability rows returned by a model. """
    def __init__(self, msg, step=None):
        if step is not None: msg = 'step %i: %s'%(step,msg)
        super(ModelOutputError,self).__init__(msg)
        self.step = step

class CapacityError(AbsorbError, MemoryError):
    pass

class TrainingError(AbsorbError, ArithmeticError):
    def __init__(self, msg, diagnostics=None):
        super(TrainingError,self).__init__(msg)
        self.diagnostics = diagnostics or dict()

class NumericError(AbsorbError, ArithmeticError):
    pass

class VerificationError(AbsorbError, AssertionError):
    pass
