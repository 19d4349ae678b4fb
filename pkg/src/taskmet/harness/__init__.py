from .config import (
    DECISION_METHODS,
    METHOD_DEFAULTS,
    METHODS,
    RL_METHODS,
    SCHEMA_VERSION,
    TASK_DEFAULTS,
    ExperimentConfig,
    content_hash,
)
from .run import RunRecord, aggregate, format_table, load_records, method_label, run

__all__ = [
    "DECISION_METHODS",
    "ExperimentConfig",
    "METHODS",
    "METHOD_DEFAULTS",
    "RL_METHODS",
    "RunRecord",
    "SCHEMA_VERSION",
    "TASK_DEFAULTS",
    "aggregate",
    "content_hash",
    "format_table",
    "load_records",
    "method_label",
    "run",
]
