"""Exception hierarchy shared across the package."""


class GnoError(Exception):
    """Base class for all errors raised by this package."""


class CorpusFormatError(GnoError):
    """A corpus line could not be parsed or violates a document invariant."""

    def __init__(self, message: str, line_no: int | None = None, doc_id: str | None = None):
        prefix = []
        if line_no is not None:
            prefix.append(f"line {line_no}")
        if doc_id is not None:
            prefix.append(f"doc {doc_id!r}")
        super().__init__((": ".join([", ".join(prefix), message]) if prefix else message))
        self.line_no = line_no
        self.doc_id = doc_id


class SchemaError(GnoError):
    """Task schema file is malformed or internally inconsistent."""


class UnknownTypeError(GnoError):
    """Lookup of an entity or relation type that the schema does not declare."""


class TemplateError(GnoError):
    """A prompt template references a slot that cannot be filled."""


class PlanError(GnoError):
    """A conversation plan cannot be built from the given configuration."""


class BackendError(GnoError):
    """Chat-completion backend failure (permanent, after retries)."""


class FixtureMissError(BackendError):
    """Replay backend has no fixture for the requested digest."""

    def __init__(self, digest: str):
        super().__init__(f"fixture-miss: no replay fixture for digest {digest}")
        self.digest = digest


class ConfigError(GnoError):
    """Invalid run configuration or manifest."""


class FailureBudgetExceeded(GnoError):
    """More conversation targets failed than the configured budget allows."""

    def __init__(self, failed: int, total: int, budget: float):
        super().__init__(
            f"{failed}/{total} targets failed, exceeding the failure budget of {budget:.0%}"
        )
        self.failed = failed
        self.total = total
        self.budget = budget
