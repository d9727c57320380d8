"""Exception types shared across the runtime layers."""


class TaskDualError(Exception):
    """Base class for all errors raised by this package."""


class ResourceError(TaskDualError):
    """An id referred to a processor, memory, device or channel that does not exist."""


class AllocationError(TaskDualError):
    """A simulated memory could not satisfy an allocation request."""


class RegistrationError(TaskDualError):
    """Duplicate or otherwise invalid actor/task registration."""


class ContractViolation(TaskDualError):
    """An operation was used from a context where it is not allowed."""


class QuiescenceTimeout(TaskDualError):
    """run_until_quiescent / quiesce gave up waiting; carries a diagnostic."""


class WaitTimeout(TaskDualError):
    """An event wait with a timeout expired before the event triggered."""


class GraphError(TaskDualError):
    """Task graph validation failed (cycle, dangling edge, bad ext node, ...)."""


class GraphParseError(GraphError):
    """A graph file could not be parsed; carries line/column when known."""


class CompileError(TaskDualError):
    """A graph could not be compiled (unregistered task, bad resource, ...)."""


class ExecutionStateError(TaskDualError):
    """An execution was started while another one was still outstanding."""


class ExecutionPoisoned(TaskDualError):
    """Waiting on an event whose producing execution failed."""


class TraceError(TaskDualError):
    """Trace demarcation or replay misuse."""
