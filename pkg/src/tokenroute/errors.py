"""Exception types shared across the package."""


class TokenRouteError(Exception):
    """Base class for all package errors."""


class ConfigError(TokenRouteError, ValueError):
    pass


class ChecksumMismatch(TokenRouteError):
    pass


class DuplicateAgent(TokenRouteError):
    pass


class UnknownAgent(TokenRouteError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class MissingSection(TokenRouteError, ValueError):
    pass


class DocumentError(TokenRouteError, ValueError):
    pass


class GenerationFailed(TokenRouteError):
    def __init__(self, round_index: int, reason: str = ""):
        self.round_index = round_index
        self.reason = reason
        super().__init__(f"generation failed in round {round_index}: {reason}")


class StalledBootstrap(TokenRouteError):
    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class UntrainedHead(TokenRouteError):
    pass


class RoutingUndecided(TokenRouteError):
    pass


class PlanParseError(TokenRouteError, ValueError):
    pass


class AgentOutOfScope(TokenRouteError):
    pass


class ConsecutiveAgentError(PlanParseError):
    pass


class UnknownExecutor(TokenRouteError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)
