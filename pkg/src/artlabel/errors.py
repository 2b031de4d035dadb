"""Exception hierarchy shared across the package."""


class ArtLabelError(Exception):
    """Base class for all package errors."""


class SchemaParseError(ArtLabelError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaValidationError(ArtLabelError):
    def __init__(self, invariant, detail=""):
        self.invariant = invariant
        msg = f"schema invariant violated: {invariant}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class InputError(ArtLabelError):
    """Bad user-supplied data (files, resolutions, mismatched graphs)."""


class GraphStructureError(ArtLabelError):
    """Centerline topology that cannot be contracted."""


class FeatureError(ArtLabelError):
    """Degenerate geometry while computing node or edge features."""


class NumericError(ArtLabelError):
    def __init__(self, block, round_index=None):
        self.block = block
        self.round_index = round_index
        where = block if round_index is None else f"{block} (round {round_index})"
        super().__init__(f"non-finite activation in {where}")


class TrainingDataError(ArtLabelError):
    pass


class DivergenceError(ArtLabelError):
    pass
