"""Exception hierarchy shared by all modules.

Every error carries the CLI exit code it maps to.
"""


class CrossUttError(Exception):
    exit_code = 3


class InputError(CrossUttError, ValueError):
    exit_code = 2


class ShapeError(InputError):
    pass


class DegenerateRowError(CrossUttError, ValueError):
    pass


class VocabError(InputError):
    pass


class SchemaError(InputError):
    pass


class FormatError(InputError):
    pass


class ValidationError(InputError):
    pass


class StateError(CrossUttError, RuntimeError):
    pass


class SearchError(CrossUttError, RuntimeError):
    pass
