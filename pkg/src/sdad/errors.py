"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class SdadError(Exception):
    """Base class for all toolkit errors."""


# --- manifest ---

class ParseError(SdadError):
    """A manifest line is not valid JSON."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class SchemaError(SdadError):
    """A required field is missing or has an invalid value."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"field {field!r}" + (f": {message}" if message else ""))


class TaxonomyError(SdadError):
    """Invalid taxonomy definition or out-of-range subgroup coordinates."""


class InvariantError(SdadError):
    """A structural invariant would be violated."""


# --- embeddings ---

class FormatError(SdadError):
    """Embedding store file is malformed (bad magic, truncation, zero dimension)."""


class ZeroVectorError(SdadError):
    """Cannot normalize a zero-length vector."""


class DimensionMismatch(SdadError):
    """Vector/matrix dimensions do not agree."""


# --- subgroup identification ---

class EmptyBank(SdadError):
    """The subgroup text bank has no entries."""


class MissingEmbedding(SdadError):
    """A sample has neither a subgroup label nor an embedding reference."""

    def __init__(self, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"sample {sample_id!r} has no embedding")


class UnlabeledSample(SdadError):
    """A sample is missing its subgroup label."""

    def __init__(self, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"sample {sample_id!r} is unlabeled")


# --- captions / masks ---

class UnknownClassValue(SdadError):
    """A mask pixel value is not present in the class palette."""

    def __init__(self, value):
        self.value = value
        super().__init__(f"mask value {value!r} not in palette")


class EmptyMaskError(SdadError):
    """The mask contains no labeled pixels."""


class EmptyCaption(SdadError):
    """Cannot style an empty caption."""


# --- backend ---

class BackendError(SdadError):
    """Base class for generative-backend failures."""


class BackendTimeout(BackendError):
    """The backend did not answer within the configured timeout."""


class BackendProtocolError(BackendError):
    """The backend answered outside the documented wire contract."""


class BackendRemoteError(BackendError):
    """The backend reported a server-side error."""


class DecodeError(SdadError):
    """Payload bytes are not a decodable PNG."""


class EmptyInput(SdadError):
    """The input payload is empty."""


# --- augmentor ---

class EmptyDataset(SdadError):
    """No original samples to draw from."""


class SingletonTaxonomy(SdadError):
    """Cannot pick a distinct target subgroup when |Z| < 2."""


class AugmentationJobError(BackendError):
    """A backend failure inside a synthesis job; carries the job index."""

    def __init__(self, job_index: int, cause: Exception):
        self.job_index = job_index
        self.cause = cause
        super().__init__(f"job {job_index} failed: {cause}")


# --- metrics ---

class StatsError(SdadError):
    """Feature statistics are not valid for the requested operation (e.g. n < 2)."""


class NotSymmetric(SdadError):
    """Matrix is not symmetric within tolerance."""


class EigenFailure(SdadError):
    """Symmetric eigendecomposition failed to converge."""


class NumericalFailure(SdadError):
    """A metric computation produced a non-finite value."""


class ShapeMismatch(SdadError):
    """Ground-truth and prediction grids have different shapes."""


class ClassOutOfRange(SdadError):
    """A mask grid contains a class id outside [0, K)."""


class AllClassesEmpty(SdadError):
    """Every class was excluded from the mean (empty unions)."""


class UnknownEventKind(SdadError):
    """An infraction event kind is missing from the penalty table."""

    def __init__(self, kind: str):
        self.kind = kind
        super().__init__(f"no penalty factor for event kind {kind!r}")


# --- reporting / cli ---

class MissingSubgroup(SdadError):
    """A report input does not cover every subgroup."""


class ConfigError(SdadError):
    """Run configuration is invalid (unknown key, missing path, bad value)."""


class UsageError(SdadError):
    """Command line could not be parsed."""
