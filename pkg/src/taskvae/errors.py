"""Exception hierarchy. The CLI maps these onto exit codes."""


class TaskVAEError(Exception):
    pass


class ConfigError(TaskVAEError, ValueError):
    """Bad configuration, scenario string or budget (exit code 2)."""


class ScenarioError(ConfigError):
    pass


class DataError(TaskVAEError, ValueError):
    """Malformed, missing or insufficient input data (exit code 3)."""


class TrainingError(TaskVAEError, RuntimeError):
    """Non-finite loss or activations during optimisation."""


class TopologyError(TaskVAEError, ValueError):
    """Parameter sets that do not line up (e.g. Fisher vs. model)."""
