# SECTION: Exception hierarchy shared by the mapping library and the CLI
class MappingError(Exception):
    """Base class for every error raised by the mapping library."""


class NumericalFailure(MappingError):
    '''
    A factorization or variance stayed non-positive even after the jitter retries.
    `expert_id` and `scan_index` are filled in by the callers that know them.
    '''
    def __init__(self, message, expert_id=None, scan_index=None):
        super().__init__(message)
        self.message = message
        self.expert_id = expert_id
        self.scan_index = scan_index

    def with_context(self, expert_id=None, scan_index=None):
        # Keep whatever context was attached deeper down the stack
        return NumericalFailure(
            self.message,
            expert_id=self.expert_id if expert_id is None else expert_id,
            scan_index=self.scan_index if scan_index is None else scan_index,
        )

    def __str__(self):
        context = []
        if self.expert_id is not None:
            context.append(f"expert {self.expert_id}")
        if self.scan_index is not None:
            context.append(f"scan {self.scan_index}")
        if context:
            return f"{self.message} ({', '.join(context)})"
        return self.message


class PreconditionError(MappingError, ValueError):
    """An operation was called on inputs that violate its documented precondition."""


class ScanLogParseError(MappingError, ValueError):
    def __init__(self, path, line_number, reason):
        super().__init__(f"{path}:{line_number}: {reason}")
        self.path = path
        self.line_number = line_number
        self.reason = reason
#!SECTION
