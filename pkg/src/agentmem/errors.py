"""Exception types shared across the kernel."""


class AgentMemError(Exception):
    """Base class for all kernel errors."""


class CorruptFile(AgentMemError):
    pass


class SchemaVersionMismatch(AgentMemError):
    pass


class OracleChangeSetInvalid(AgentMemError):
    pass


class OracleSplitInvalid(AgentMemError):
    pass


class OracleTemplateInvalid(AgentMemError):
    pass


class DuplicateId(AgentMemError):
    pass


class MissingRequiredSlot(AgentMemError):
    pass


class CycleDetected(AgentMemError):
    pass


class UnboundConsumer(AgentMemError):
    pass


class SessionClosed(AgentMemError):
    pass


class MergeConflict(AgentMemError):
    pass


class OperatorFailed(AgentMemError):
    pass


class StepLimitExceeded(AgentMemError):
    pass


class NoTransition(AgentMemError):
    pass


class UnknownTarget(AgentMemError):
    pass


class UnknownCategory(AgentMemError):
    pass


class UnknownTemplateSet(AgentMemError):
    pass


class MissingFixture(AgentMemError):
    pass


class AlreadySuspended(AgentMemError):
    pass
