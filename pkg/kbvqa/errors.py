"""Engine exceptions.

Every error carries a machine-readable ``code`` and, once it crosses a pipeline
boundary, the ``stage`` it happened in. ``envelope()`` renders the same shape the
CLI prints on failure.
"""


class EngineError(Exception):
    code = "ENGINE_ERROR"

    def __init__(self, message, *, code=None, stage=None):
        super().__init__(message)
        self.message = message
        if code:
            self.code = code
        self.stage = stage

    def envelope(self):
        return {"error": {"message": self.message, "code": self.code, "stage": self.stage}}


class DimensionError(EngineError):
    code = "DIMENSION_MISMATCH"


class InvalidStateError(EngineError):
    code = "INVALID_STATE"


class NumericError(EngineError):
    code = "NON_FINITE"


class EmptyQueryError(EngineError):
    code = "EMPTY_QUERY"


class ContractError(EngineError):
    code = "CONTRACT_VIOLATION"


class ConfigurationError(EngineError):
    code = "BAD_CONFIG"


class FormatError(EngineError):
    code = "BAD_FORMAT"

    def __init__(self, message, *, offset=None, **kwargs):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message, **kwargs)
        self.offset = offset


class TrainingError(EngineError):
    code = "TRAINING_DIVERGED"

    def __init__(self, message, *, step=None, **kwargs):
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message, **kwargs)
        self.step = step


class GeneratorError(EngineError):
    code = "GENERATOR_FAILURE"


class GeneratorTimeout(GeneratorError):
    code = "TIMEOUT"


class GeneratorConnectionError(GeneratorError):
    code = "CONNECTION_FAILED"


class GeneratorProtocolError(GeneratorError):
    code = "PROTOCOL_ERROR"


class StageError(EngineError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    code = "STAGE_FAILED"

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}", stage=stage)
        self.cause = cause
        if isinstance(cause, EngineError):
            self.code = cause.code
