"""
errors.py
---------
Error hierarchy for the homogenization pipeline.

Every error carries a module-qualified ``code`` ("fem.SolverFailure", ...)
and an optional ``details`` dict that stage scripts write into their
JSON summaries.
"""


class HomogError(Exception):
    module = "pipeline"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    @property
    def code(self):
        return f"{self.module}.{type(self).__name__}"

    def to_dict(self):
        return {"code": self.code, "message": str(self), "details": self.details}


# =============================================================================
# MICROSTRUCTURE
# =============================================================================
class TensorRejected(HomogError, ValueError):
    """Raised by validate_tensor; ``violations`` lists every failed assumption."""

    module = "microstructure"

    def __init__(self, message, violations=(), **details):
        super().__init__(message, **details)
        self.violations = list(violations)


class EllipticityViolation(TensorRejected):
    pass


class SymmetryViolation(TensorRejected):
    pass


class NonFiniteEntry(TensorRejected):
    pass


class NonConvergence(HomogError, RuntimeError):
    module = "microstructure"

    def __init__(self, message, residual=float("nan"), **details):
        super().__init__(message, residual=residual, **details)
        self.residual = residual


class ResolutionMismatch(HomogError, ValueError):
    module = "microstructure"


class NotDivergenceFree(HomogError, ValueError):
    module = "microstructure"


class NonZeroMean(HomogError, ValueError):
    module = "microstructure"


# =============================================================================
# GEOMETRY
# =============================================================================
class NonConvex(HomogError, ValueError):
    module = "geometry"


class DegenerateEdge(HomogError, ValueError):
    module = "geometry"


class SlopeInfinite(HomogError, ValueError):
    module = "geometry"


# =============================================================================
# FEM
# =============================================================================
class TargetTooFine(HomogError, ValueError):
    module = "fem"


class QuadratureUnderResolved(HomogError, ValueError):
    module = "fem"


class SolverFailure(HomogError, RuntimeError):
    module = "fem"

    def __init__(self, message, residual=float("nan"), **details):
        super().__init__(message, residual=residual, **details)
        self.residual = residual


# =============================================================================
# SPECTRAL
# =============================================================================
class ConvergenceFailure(HomogError, RuntimeError):
    module = "spectral"


class NonPositiveEigenvalue(HomogError, ValueError):
    module = "spectral"


class NonSymmetricPencil(HomogError, ValueError):
    module = "spectral"


# =============================================================================
# BOUNDARY LAYER
# =============================================================================
class UnresolvedCell(HomogError, ValueError):
    module = "boundary_layer"


class StripNonConvergence(NonConvergence):
    module = "boundary_layer"


class NoDecay(HomogError, RuntimeError):
    module = "boundary_layer"


class NonCauchy(HomogError, RuntimeError):
    module = "boundary_layer"

    def __init__(self, message, record=(), **details):
        super().__init__(message, **details)
        self.record = list(record)


class MissingTail(HomogError, KeyError):
    module = "boundary_layer"

    def __str__(self):
        return self.args[0] if self.args else ""


class UnresolvedOscillation(HomogError, ValueError):
    module = "boundary_layer"


class NotRational(HomogError, ValueError):
    module = "boundary_layer"


# =============================================================================
# EXPANSION
# =============================================================================
class MissingCorrector(HomogError, ValueError):
    module = "expansion"


class ClusterMismatch(HomogError, ValueError):
    module = "expansion"


# =============================================================================
# CLI
# =============================================================================
class ConfigParse(HomogError, ValueError):
    module = "cli"


class EmptyReport(HomogError, ValueError):
    module = "cli"
