"""Exception taxonomy shared across the pipeline.

Kept in one place because several errors cross module boundaries
(BudgetExhausted is raised by both the admission gate and the accountant).
"""

from __future__ import annotations


class DPRagError(Exception):
    """Base class for all errors raised by this package."""


class DuplicatePrivacyUnit(DPRagError):
    def __init__(self, privacy_unit: str):
        super().__init__(f"privacy unit {privacy_unit!r} already has a document")
        self.privacy_unit = privacy_unit


class EmptyRecord(DPRagError):
    """A corpus record has an empty privacy unit or empty text."""


class BudgetExhausted(DPRagError):
    def __init__(self, shortfall: float, message: str | None = None):
        super().__init__(
            message or f"privacy budget exhausted (shortfall {shortfall:.6g})"
        )
        self.shortfall = shortfall


class NoMatchingCharge(DPRagError):
    """Refund requested against a label with insufficient pre-charged epsilon."""


class DimensionMismatch(DPRagError):
    pass


class EmptyText(DPRagError):
    pass


class EmptyScores(DPRagError):
    pass


class ProviderUnavailable(DPRagError):
    """A remote backend failed after the configured retries."""


class ContextTooLong(DPRagError):
    pass


class VocabMismatch(DPRagError):
    """Provider returned a distribution whose length disagrees with its vocabulary."""


class UnknownTargetToken(DPRagError):
    pass


class TemplateMalformed(DPRagError):
    pass


class WrongStage(DPRagError):
    """A score-transform stage was applied out of order."""


class IndexFormatError(DPRagError):
    """Persisted index file is corrupt or has an unsupported version."""
