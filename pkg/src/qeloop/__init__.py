"""qeloop: a deterministic RL loop for software test-case generation.

PPO-trained agents pick generation strategies and retrieval modes, a
DQN-tuned hybrid vector-graph knowledge store supplies context, and a
seeded QE simulator closes the feedback loop.
"""

__version__ = "0.1.0"

from .domain import (
    AgentRole,
    DefectReport,
    FeedbackRecord,
    GenerationStrategy,
    Requirement,
    RetrievalMode,
    Severity,
    TestCase,
)
from .trainer import RunConfig, TrainingSystem, run_ablation_suite, run_training

__all__ = [
    "AgentRole",
    "DefectReport",
    "FeedbackRecord",
    "GenerationStrategy",
    "Requirement",
    "RetrievalMode",
    "RunConfig",
    "Severity",
    "TestCase",
    "TrainingSystem",
    "run_ablation_suite",
    "run_training",
    "__version__",
]
