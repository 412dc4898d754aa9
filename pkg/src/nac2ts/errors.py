"""Exception hierarchy shared by all modules."""


class Nac2tsError(Exception):
    """Base class for every error raised by the package."""


class InvariantError(Nac2tsError, ValueError):
    """An object violates a structural invariant (probabilities, rewards, gamma)."""


class ShapeError(InvariantError):
    """Array dimensions do not agree."""


class DomainError(Nac2tsError, ValueError):
    """A scalar argument lies outside its admissible range."""


class ErgodicityError(InvariantError):
    """A Markov chain is reducible or periodic."""


class SolverError(Nac2tsError, RuntimeError):
    """A linear solve or iterative solver failed its accuracy guard."""


class ConfigError(Nac2tsError, ValueError):
    """An experiment configuration is malformed."""
