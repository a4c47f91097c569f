"""Exception hierarchy for the reduced Kähler-Ricci flow laboratory."""


class KRFlowError(Exception):
    """Base class for all numerical failures raised by this package."""


class NonKahler(KRFlowError):
    """A profile left the Kähler cone (u'' <= 0 or u' outside the moment interval)."""


class QuadratureOverflow(KRFlowError):
    pass


class OutOfDomain(KRFlowError):
    """A gauge translation pushed the profile outside the truncated grid."""


class MinimizationDidNotBracket(KRFlowError):
    pass


class PathLeavesKahlerCone(KRFlowError):
    pass


class StepSizeUnderflow(KRFlowError):
    pass


class NonPositiveValues(KRFlowError):
    pass


class IntegrationBlowUp(KRFlowError):
    pass


class AsymptoticsInvalid(KRFlowError):
    pass


class NoBracket(KRFlowError):
    pass


class ConfigError(KRFlowError):
    """Invalid experiment configuration (unknown key, out-of-range value)."""
