"""Exception types shared across kamforge modules."""


class KamforgeError(Exception):
    """Base class for all kamforge errors."""


class InvalidInputError(KamforgeError, ValueError):
    """An argument violates a documented precondition."""


class CapabilityError(KamforgeError):
    """The input cannot be evaluated in the way the operation needs."""


class ModelConstructionError(KamforgeError, ValueError):
    """A model configuration violates a structural invariant."""


class SmallDivisorExclusion(KamforgeError):
    """A divisor fell below the exclusion threshold.

    Attributes
    ----------
    k : tuple of int
        Fourier mode of the offending divisor.
    blocks : tuple
        Block ids involved (empty for the scalar divisor).
    divisor : float
        Smallest singular value found.
    """

    def __init__(self, k, blocks, divisor, kind="scalar"):
        self.k = tuple(int(v) for v in k)
        self.blocks = tuple(blocks)
        self.divisor = float(divisor)
        self.kind = kind
        super().__init__(
            f"small divisor {self.divisor:.3e} at k={self.k} "
            f"kind={kind} blocks={self.blocks}")


class SmallnessViolation(KamforgeError):
    """A Lie-series or smallness precondition failed."""


class FlowEscapeError(KamforgeError):
    """A trajectory left the admissible domain."""

    def __init__(self, time, message="trajectory left the domain"):
        self.time = float(time)
        super().__init__(f"{message} at t={self.time:.6g}")


class ScheduleInfeasible(KamforgeError):
    """The parameter schedule stops contracting."""

    def __init__(self, j, message):
        self.j = int(j)
        super().__init__(f"schedule infeasible at j={self.j}: {message}")


class ConfigError(KamforgeError, ValueError):
    """Invalid configuration value, naming section, key and constraint."""

    def __init__(self, section, key, constraint, line=None):
        self.section = section
        self.key = key
        self.constraint = constraint
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"config error{where}: [{section}] {key}: {constraint}")
