"""Exception and warning types shared across the package."""


class GfgError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(GfgError):
    """A model description does not follow the file schema."""


class GraphError(GfgError):
    """Base class for graph invariant violations."""


class CycleError(GraphError):
    pass


class LinkTargetError(GraphError):
    pass


class CollectionOverlapError(GraphError):
    pass


class ArityError(GraphError):
    pass


class SubsetAnnotationError(GraphError):
    pass


class ControlFlowError(GraphError):
    """Malformed branch/selection wiring."""


class UnknownNameError(GraphError):
    pass


class PredicateError(GfgError):
    """A branch or selection predicate failed to evaluate."""


class DomainError(GfgError, ValueError):
    """A value lies outside the domain of an operation or support of a distribution."""


class UnsupportedError(GfgError):
    pass


class UncoveredNodeError(GfgError):
    """A latent node lies outside every node collection."""


class OwnershipError(GfgError):
    """Latents are not owned by exactly one variational factor."""


class DivergenceError(GfgError):
    """The objective estimate became non-finite during optimization."""


class MissingMessageError(GfgError):
    pass


class TooLargeError(GfgError):
    pass


class SupportMismatchError(GfgError, ValueError):
    pass


class SlotSignatureError(GfgError):
    pass


class BindingError(GfgError):
    pass


class NonConvergenceWarning(UserWarning):
    """Message passing stopped at the sweep limit without converging."""
