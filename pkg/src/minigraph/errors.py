"""Exception hierarchy shared by all minigraph modules."""


class MinigraphError(Exception):
    """Base class for everything raised by this package."""


class ArgumentError(MinigraphError):
    """Bad argument detected before anything was scheduled."""


class LifecycleError(MinigraphError):
    """Use of a released tensor, deleted tag, or double free."""


class StateError(MinigraphError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class InferenceError(MinigraphError):
    """Shape inference failed; message names the offending node."""


class GraphParseError(MinigraphError):
    """Malformed serialized graph text; message carries the line number."""


class OperationFailed(MinigraphError):
    """A lazily executed operation raised; surfaced at the next sync point.

    The original exception is attached as ``__cause__``.
    """


class PlanError(MinigraphError):
    """Internal memory-planner invariant broken (should be impossible)."""


class CorruptRecordError(MinigraphError):
    """Record payload failed its CRC check; message carries the record index."""


class RecordParseError(MinigraphError):
    """Record file is truncated or structurally malformed."""


class KVStoreError(MinigraphError):
    """Key-value store misuse (double init, push before init, bad shape)."""
