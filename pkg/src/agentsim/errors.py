class AgentSimError(Exception):
    """Base class for all errors raised by agentsim."""


class InvalidInputError(AgentSimError, ValueError):
    """An argument violates an operation's precondition."""


class StateError(AgentSimError, RuntimeError):
    """An operation was applied to an object in the wrong state."""


class ConfigError(AgentSimError, ValueError):
    """A run or experiment configuration is inconsistent or malformed."""
