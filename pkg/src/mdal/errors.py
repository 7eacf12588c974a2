"""Exception hierarchy shared by every mdal module."""


class MDALError(Exception):
    pass


class ContractViolation(MDALError, ValueError):
    """An operation was called with arguments that break its preconditions."""


class NonFiniteError(ContractViolation):
    pass


class ConfigurationError(MDALError, ValueError):
    pass


class GraphReuseError(MDALError, RuntimeError):
    """Backward was requested on a graph whose intermediate state was freed."""


class VideoTooShortError(MDALError, ValueError):
    pass


class LoadError(MDALError, IOError):
    pass


class InputError(MDALError, ValueError):
    pass
