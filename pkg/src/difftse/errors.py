"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates an operation's contract (shape, emptiness)."""


class DomainError(ValueError):
    """A scalar argument lies outside its valid domain."""


class SingularityError(DomainError):
    """Operation requested at a point where it is singular (sigma(0) = 0)."""


class CorpusError(RuntimeError):
    """Corpus directory is malformed, truncated, or fails its checksums."""


class CheckpointError(RuntimeError):
    """Parameter checkpoint file is malformed or inconsistent."""


class ConfigError(ValueError):
    """Run configuration is unparseable or inconsistent."""
