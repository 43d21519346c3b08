"""Exception hierarchy.

Every domain failure raised by the library derives from :class:`EmbedlabError`;
the CLI maps these to exit code 1.
"""


class EmbedlabError(Exception):
    """Base class for all domain errors."""


class FormatError(EmbedlabError, ValueError):
    pass


class UnsupportedDtype(FormatError):
    pass


class DataError(EmbedlabError, ValueError):
    pass


class ShapeError(DataError):
    pass


class RangeError(EmbedlabError, ValueError):
    pass


class DegenerateRow(DataError):
    def __init__(self, row, message=None):
        self.row = int(row)
        super().__init__(message or f"row {self.row} has (near) zero L2 norm")


class ManifestError(EmbedlabError, ValueError):
    pass


class VocabError(EmbedlabError, ValueError):
    pass


class TemplateError(EmbedlabError, ValueError):
    pass


class EmptyClass(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class CapacityError(EmbedlabError, ValueError):
    pass


class TrainingDiverged(EmbedlabError, RuntimeError):
    def __init__(self, epoch, message=None):
        self.epoch = int(epoch)
        super().__init__(message or f"non-finite loss at epoch {self.epoch}")


class BootstrapDegenerate(EmbedlabError, RuntimeError):
    pass


class DegenerateDifferences(DataError):
    pass


class DegenerateTest(DataError):
    pass


class DegenerateCovariate(DataError):
    pass


class DegenerateHorizon(DataError):
    pass


class NonConvergenceWarning(RuntimeWarning):
    """Emitted when an iterative fit stops without meeting its tolerance."""
