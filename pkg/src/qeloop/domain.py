"""Core domain records for the test-generation learning loop.

Everything here is an immutable value object: requirements, test cases,
defect reports, and the QE feedback records that carry the learning signal.
No behavior beyond construction, validation, and serialization lives here.

Serialization contract: every type round-trips through ``to_dict`` /
``from_dict``, and ``FeedbackRecord`` additionally round-trips through a
one-object-per-line JSONL encoding with severity spelled as an upper-camel
string (``"Critical"``, ``"High"``, ...).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping

DEFAULT_COVERAGE_DIM = 32


class DomainError(Exception):
    """Base class for domain validation failures."""


class RangeViolation(DomainError):
    """A bounded field is outside its permitted range."""

    def __init__(self, field_name: str, value: object, bounds: str):
        self.field_name = field_name
        self.value = value
        self.bounds = bounds
        super().__init__(f"{field_name}={value!r} outside {bounds}")


class UnknownTestCase(DomainError):
    """A feedback record references a test case absent from the catalog."""


class GenerationStrategy(IntEnum):
    """Closed set of test-generation strategies; values are action indices."""

    HappyPath = 0
    Boundary = 1
    Negative = 2
    Integration = 3
    RegressionDerived = 4


class RetrievalMode(IntEnum):
    """How knowledge is retrieved while generating a test case."""

    VectorOnly = 0
    GraphOnly = 1
    Hybrid = 2


class Severity(IntEnum):
    """Defect severity with a total order: Critical > High > Medium > Low."""

    Low = 0
    Medium = 1
    High = 2
    Critical = 3


class AgentRole(IntEnum):
    """The five agent roles; values are stable across runs."""

    LegacyTestAnalysis = 0
    FunctionalChangeMapping = 1
    IntegrationPoint = 2
    TestCaseGeneration = 3
    ComplianceValidation = 4


@dataclass(frozen=True)
class Requirement:
    """One unit of workflow context that test cases are generated against.

    ``hidden_defect_ids`` is simulation ground truth: it is only ever read by
    the QE environment, never by agents or the knowledge store.
    """

    id: str
    text: str
    component_tags: frozenset[str] = field(default_factory=frozenset)
    hidden_defect_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "component_tags": sorted(self.component_tags),
            "hidden_defect_ids": list(self.hidden_defect_ids),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Requirement":
        return cls(
            id=d["id"],
            text=d["text"],
            component_tags=frozenset(d.get("component_tags", ())),
            hidden_defect_ids=tuple(d.get("hidden_defect_ids", ())),
        )


@dataclass(frozen=True)
class TestCase:
    """A structured, abstract test case (no prose steps)."""

    id: str
    requirement_refs: tuple[str, ...]
    strategy: GenerationStrategy
    retrieval_mode: RetrievalMode
    coverage_vector: tuple[float, ...]
    generating_agent: AgentRole

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "requirement_refs": list(self.requirement_refs),
            "strategy": self.strategy.name,
            "retrieval_mode": self.retrieval_mode.name,
            "coverage_vector": list(self.coverage_vector),
            "generating_agent": self.generating_agent.name,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TestCase":
        return cls(
            id=d["id"],
            requirement_refs=tuple(d["requirement_refs"]),
            strategy=GenerationStrategy[d["strategy"]],
            retrieval_mode=RetrievalMode[d["retrieval_mode"]],
            coverage_vector=tuple(float(x) for x in d["coverage_vector"]),
            generating_agent=AgentRole[d["generating_agent"]],
        )


def validate_test_case(
    test: TestCase,
    coverage_dim: int,
    known_requirements: Iterable[str],
) -> TestCase:
    """Check referential and range invariants of a test case."""
    known = set(known_requirements)
    if not test.requirement_refs:
        raise RangeViolation("requirement_refs", (), "non-empty list")
    for ref in test.requirement_refs:
        if ref not in known:
            raise UnknownTestCase(f"test {test.id} references unknown requirement {ref}")
    if len(test.coverage_vector) != coverage_dim:
        raise RangeViolation(
            "coverage_vector", len(test.coverage_vector), f"length {coverage_dim}"
        )
    for x in test.coverage_vector:
        if not (0.0 <= x <= 1.0) or math.isnan(x):
            raise RangeViolation("coverage_vector", x, "[0, 1]")
    return test


@dataclass(frozen=True)
class DefectReport:
    """One defect verdict attached to one executed test case.

    ``defect_ref`` names the underlying catalog defect for a true report and
    is ``None`` for a false positive, which makes the true-report-to-defect
    mapping explicit and lets metrics count distinct detected defects.
    """

    id: str
    test_case_ref: str
    severity: Severity
    is_false_positive: bool
    defect_ref: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "test_case_ref": self.test_case_ref,
            "severity": self.severity.name,
            "is_false_positive": self.is_false_positive,
            "defect_ref": self.defect_ref,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DefectReport":
        return cls(
            id=d["id"],
            test_case_ref=d["test_case_ref"],
            severity=Severity[d["severity"]],
            is_false_positive=bool(d["is_false_positive"]),
            defect_ref=d.get("defect_ref"),
        )


@dataclass(frozen=True)
class FeedbackRecord:
    """One QE verdict (simulated or replayed) on one executed test case."""

    test_case_ref: str
    defects: tuple[DefectReport, ...]
    execution_time: float
    baseline_time: float
    quality_rating: float
    requirement_coverage_assessment: float
    functional_coverage_validation: float
    workflow_integration_factor: float
    compliance_score: float

    def true_defects(self) -> tuple[DefectReport, ...]:
        return tuple(d for d in self.defects if not d.is_false_positive)

    def false_positives(self) -> tuple[DefectReport, ...]:
        return tuple(d for d in self.defects if d.is_false_positive)

    def to_dict(self) -> dict:
        return {
            "test_case_ref": self.test_case_ref,
            "defects": [d.to_dict() for d in self.defects],
            "execution_time": self.execution_time,
            "baseline_time": self.baseline_time,
            "quality_rating": self.quality_rating,
            "requirement_coverage_assessment": self.requirement_coverage_assessment,
            "functional_coverage_validation": self.functional_coverage_validation,
            "workflow_integration_factor": self.workflow_integration_factor,
            "compliance_score": self.compliance_score,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeedbackRecord":
        return cls(
            test_case_ref=d["test_case_ref"],
            defects=tuple(DefectReport.from_dict(x) for x in d.get("defects", ())),
            execution_time=float(d["execution_time"]),
            baseline_time=float(d["baseline_time"]),
            quality_rating=float(d["quality_rating"]),
            requirement_coverage_assessment=float(d["requirement_coverage_assessment"]),
            functional_coverage_validation=float(d["functional_coverage_validation"]),
            workflow_integration_factor=float(d["workflow_integration_factor"]),
            compliance_score=float(d["compliance_score"]),
        )

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "FeedbackRecord":
        return cls.from_dict(json.loads(line))


# (field, low, high, low_inclusive, high_inclusive); None means unbounded.
_FEEDBACK_BOUNDS = (
    ("execution_time", 0.0, None, False, False),
    ("baseline_time", 0.0, None, False, False),
    ("quality_rating", 0.0, 1.0, True, True),
    ("requirement_coverage_assessment", 0.0, 1.0, True, True),
    ("functional_coverage_validation", 0.0, 1.0, True, True),
    ("workflow_integration_factor", 0.0, 2.0, False, True),
    ("compliance_score", 0.0, 1.0, True, True),
)


def validate_feedback(
    record: FeedbackRecord,
    catalog: Iterable[str] | Mapping[str, TestCase],
) -> FeedbackRecord:
    """Check all range and referential invariants of a feedback record.

    ``catalog`` is the set (or mapping keyed by id) of known test cases.
    Returns the record unchanged on success.
    """
    for name, lo, hi, lo_inc, hi_inc in _FEEDBACK_BOUNDS:
        value = getattr(record, name)
        if not isinstance(value, (int, float)) or math.isnan(value):
            raise RangeViolation(name, value, "finite real")
        bounds = f"{'[' if lo_inc else '('}{lo}, {hi if hi is not None else 'inf'}{']' if hi_inc else ')'}"
        if lo is not None and (value < lo or (not lo_inc and value == lo)):
            raise RangeViolation(name, value, bounds)
        if hi is not None and (value > hi or (not hi_inc and value == hi)):
            raise RangeViolation(name, value, bounds)

    known = set(catalog.keys()) if isinstance(catalog, Mapping) else set(catalog)
    if record.test_case_ref not in known:
        raise UnknownTestCase(f"feedback references unknown test case {record.test_case_ref!r}")
    for report in record.defects:
        if report.test_case_ref != record.test_case_ref:
            raise UnknownTestCase(
                f"defect report {report.id} references {report.test_case_ref!r}, "
                f"expected {record.test_case_ref!r}"
            )
        if report.is_false_positive and report.defect_ref is not None:
            raise RangeViolation("defect_ref", report.defect_ref, "None for false positives")
        if not report.is_false_positive and report.defect_ref is None:
            raise RangeViolation("defect_ref", None, "defect id for true reports")
    return record
