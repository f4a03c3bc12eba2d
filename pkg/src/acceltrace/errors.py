class AccelTraceError(Exception):
    pass


# -- data errors (bad traces, bad inputs) ------------------------------------

class TraceError(AccelTraceError):
    pass


class BadMagic(TraceError):
    pass


class UnsupportedVersion(TraceError):
    pass


class TruncatedRecord(TraceError):
    def __init__(self, offset: int, detail: str = "") -> None:
        self.offset = offset
        msg = f"truncated record at byte offset {offset}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class CorruptRecord(TraceError):
    def __init__(self, offset: int, detail: str) -> None:
        self.offset = offset
        super().__init__(f"corrupt record at byte offset {offset}: {detail}")


class InvariantViolation(TraceError):
    def __init__(self, violations) -> None:
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class DialectLoss(TraceError):
    pass


class ParseError(TraceError):
    def __init__(self, line: int, detail: str) -> None:
        self.line = line
        super().__init__(f"line {line}: {detail}")


class SpecError(AccelTraceError):
    pass


class UnknownTensor(AccelTraceError, KeyError):
    pass


class UnknownDevice(AccelTraceError):
    pass


# -- engine / tools ------------------------------------------------------------

class ToolError(AccelTraceError):
    def __init__(self, seq: int, cause: BaseException) -> None:
        self.seq = seq
        self.cause = cause
        super().__init__(f"tool failed at seq {seq}: {cause!r}")


class EngineError(AccelTraceError):
    pass


class ScopeMismatch(AccelTraceError):
    pass


class DuplicateName(AccelTraceError):
    pass


class UnknownTool(AccelTraceError):
    def __init__(self, name: str, known) -> None:
        self.known = sorted(known)
        super().__init__(f"unknown tool {name!r}; registered tools: {', '.join(self.known)}")


class NoToolSpecified(AccelTraceError):
    pass


class UnknownKnob(AccelTraceError):
    def __init__(self, name: str, known) -> None:
        self.known = sorted(known)
        super().__init__(f"unknown knob {name!r}; known knobs: {', '.join(self.known)}")


class NoKnobEnabled(AccelTraceError):
    pass


# -- uvm simulator -------------------------------------------------------------

class EmptyProfile(AccelTraceError):
    pass


class PlanMismatch(AccelTraceError):
    pass


class CapacityTooSmall(AccelTraceError):
    pass
