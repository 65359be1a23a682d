"""Exception hierarchy shared across the pipeline.

Every error raised by this package derives from CausalGenError so callers
can catch the whole family at stage boundaries. Names follow the failure
they report, grouped by the module that raises them.
"""

from __future__ import annotations


class CausalGenError(Exception):
    """Base class for all package errors."""


# --- causal graph ---------------------------------------------------------


class GraphError(CausalGenError):
    """Base class for concept-graph construction and query failures."""


class CycleDetected(GraphError):
    """The edge relation is not acyclic. `cycle` names one offending loop."""

    def __init__(self, cycle: list[str]):
        self.cycle = list(cycle)
        super().__init__("causal edges form a cycle: " + " -> ".join(self.cycle))


class UnknownEndpoint(GraphError):
    """An edge references a concept id that is not in the graph."""


class DuplicateId(GraphError):
    """Two concepts or two edges share an id."""


class EmptyConceptSet(GraphError):
    """A graph must contain at least one concept."""


class UnknownConcept(GraphError):
    """An operation referenced a concept id absent from the graph."""


class EmptyNewValue(GraphError):
    """An intervention supplied an empty replacement value."""


# --- gateway --------------------------------------------------------------


class GatewayError(CausalGenError):
    """Base class for model-endpoint transport and parsing failures."""


class TransportError(GatewayError):
    """The HTTP request could not be completed."""


class AuthError(GatewayError):
    """The endpoint rejected the credential (401/403)."""


class GatewayTimeout(GatewayError):
    """Every attempt timed out."""


class RetriesExhausted(GatewayError):
    """All retry attempts failed; `last_error` holds the final failure."""

    def __init__(self, message: str, last_error: Exception | None = None):
        self.last_error = last_error
        super().__init__(message)


class NoJsonFound(GatewayError):
    """The model output contains no JSON object at all."""


class MalformedJson(GatewayError):
    """A JSON-looking block was found but does not parse. `span` is the offender."""

    def __init__(self, message: str, span: str = ""):
        self.span = span
        super().__init__(message)


class SchemaError(GatewayError):
    """Base class for structured-output validation failures. `path` locates the field."""

    def __init__(self, path: str, message: str = ""):
        self.path = path
        super().__init__(message or f"{type(self).__name__} at {path}")


class MissingField(SchemaError):
    pass


class WrongKind(SchemaError):
    pass


class EmptyValue(SchemaError):
    pass


# --- extractor / manipulator ----------------------------------------------


class ExtractionFailed(CausalGenError):
    """Concept extraction gave up after its retry budget. `reason` is a short code."""

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason
        super().__init__(message or f"concept extraction failed: {reason}")


class ManipulationFailed(CausalGenError):
    """Intervention proposal gave up after its retry budget."""

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason
        super().__init__(message or f"intervention proposal failed: {reason}")


class DuplicateTargets(CausalGenError):
    """Proposed interventions do not target pairwise distinct concepts."""


class MissingTargetState(CausalGenError):
    """An intervention has no usable new value for its target concept."""


# --- numerical engine -----------------------------------------------------


class InvalidSteps(CausalGenError):
    """A schedule or solver step count is out of range."""


class ShapeMismatch(CausalGenError):
    """Tensor operands have incompatible shapes."""


class EmptySpan(CausalGenError):
    """A concept token span selects no attention maps."""


class BackendError(CausalGenError):
    """A denoiser backend call failed."""


class NonFiniteLatent(CausalGenError):
    """A latent tensor contains NaN or infinity."""


# --- evaluation -----------------------------------------------------------


class EmptyStates(CausalGenError):
    """An intervention carries no final concept states to check."""


class SchemaInvalid(CausalGenError):
    """An evaluator verdict violates the checklist rubric."""


class ServiceUnavailable(CausalGenError):
    """The remote perceptual-metric service could not be reached."""


class EmptyInput(CausalGenError):
    """Aggregation requires at least one record."""


# --- pipeline -------------------------------------------------------------


class DatasetEmpty(CausalGenError):
    """A dataset directory contains no usable images."""


class InsufficientItems(CausalGenError):
    """A dataset has fewer items than the requested sample count."""
