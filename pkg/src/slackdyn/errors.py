"""Exception hierarchy shared by all slackdyn modules."""


class SlackDynError(Exception):
    """Base class for every error raised by slackdyn."""


class ZeroImpedanceBranch(SlackDynError):
    pass


class DisconnectedGraph(SlackDynError):
    pass


class NonConvergence(SlackDynError):
    def __init__(self, message, iterations=None, trace=None):
        super().__init__(message)
        self.iterations = iterations
        self.trace = trace or []


class SingularJacobian(SlackDynError):
    pass


class NoSlackParticipant(SlackDynError):
    pass


class ConfigurationError(SlackDynError):
    """Invalid device or case configuration (e.g. two integral governors)."""


class DcSourceAbsent(ConfigurationError):
    pass


class DeviceInitInfeasible(SlackDynError):
    def __init__(self, device, message):
        super().__init__(f"{device}: {message}")
        self.device = device


class PowerFlowFailed(SlackDynError):
    pass


class StepNewtonDiverged(SlackDynError):
    """Newton iteration of an implicit step failed.

    ``ranking`` lists ``(bus_id, |mismatch|)`` pairs sorted by decreasing
    mismatch at the last iterate.
    """

    def __init__(self, t, iterations, ranking=None):
        msg = f"Newton diverged at t={t:.6f} s after {iterations} iterations"
        if ranking:
            worst = ", ".join(f"bus {b}: {m:.3e}" for b, m in ranking[:3])
            msg += f" (worst mismatch {worst})"
        super().__init__(msg)
        self.t = t
        self.iterations = iterations
        self.ranking = ranking or []


class TrajectoryTooShort(SlackDynError):
    pass


class NoPeriodDetected(SlackDynError):
    pass


class NoSlackDevice(SlackDynError):
    pass


class EmptyMachineSet(SlackDynError):
    pass


class IdentityViolated(SlackDynError):
    def __init__(self, device, t, error):
        super().__init__(f"p != ps + pt for {device} at t={t:.6f} s (error {error:.3e})")
        self.device = device
        self.t = t


class ResidualTransientPower(SlackDynError):
    def __init__(self, device, value):
        super().__init__(f"transient power of {device} did not vanish: |pt| = {value:.3e}")
        self.device = device


class SchemaError(SlackDynError):
    pass


class ParseError(SlackDynError):
    pass


class ValidationError(SlackDynError):
    pass
