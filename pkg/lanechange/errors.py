"""
Error hierarchy shared by the library and the command line.

Every error carries a ``details`` dict, in the spirit of the
``error_details`` dicts the pipeline reports, and an ``exit_code`` the
CLI returns: 2 for bad input, 3 for numerical failure.
"""


class LaneChangeError(Exception):
    """Base class for all lanechange errors"""
    exit_code = 1

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        """Machine-readable error summary"""
        return {
            'error': type(self).__name__,
            'message': self.message,
            'details': {key: _plain(value) for key, value in self.details.items()},
        }


class InputError(LaneChangeError):
    exit_code = 2


class InvalidGeometryError(InputError):
    """Degenerate line or lane description"""


class InvalidValueError(InputError):
    """Non-finite or out-of-range value"""


class ParseError(InputError):
    """Malformed input file; details name the row and field"""


class NotEnoughHistoryError(InputError):
    """Predictor called with too few past positions"""


class TraceGapError(InputError):
    """Prediction trace has no prediction at a required issue time"""


class TooShortError(InputError):
    """Track too short to differentiate"""


class InsufficientDataError(InputError):
    """Not enough samples to fit a lane"""


class ConfigError(InputError):
    """Invalid settings or configuration file"""


class NumericalError(LaneChangeError):
    exit_code = 3


class NonFiniteError(NumericalError):
    """Non-finite reward, feature or derivative"""


class NotPositiveDefiniteError(NumericalError):
    """Hessian could not be regularized to negative definite"""


class DivergenceError(NumericalError):
    """Likelihood ascent produced a non-finite objective"""


def _plain(value):
    # numpy scalars and tuples do not serialize to JSON as-is
    if hasattr(value, 'tolist'):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    return value
