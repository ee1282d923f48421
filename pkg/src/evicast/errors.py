"""Error taxonomy shared across the package.

ContractError marks a violated precondition on a pure operation (bad
dimension, non-finite input, point outside its body).  ProtocolError marks
a misuse of the round/observe interaction order.  ConfigError marks an
invalid experiment description before any run starts.
"""


class ContractError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class UnresolvedOutcomeError(ContractError):
    """An audit needed an outcome that was never delivered."""
