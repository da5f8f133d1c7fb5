"""Exception types shared across the package."""


class CFBenchError(Exception):
    """Base class for all errors raised by cfbench."""


class ParseError(CFBenchError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class ReferentialError(CFBenchError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DuplicatePairError(CFBenchError, ValueError):
    pass


class DomainError(CFBenchError, ValueError):
    pass


class KindMismatchError(CFBenchError, TypeError):
    pass


class ConfigurationError(CFBenchError, ValueError):
    pass


class TrainingDivergedError(CFBenchError, FloatingPointError):
    def __init__(self, epoch, detail=""):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))


class NonConvergenceError(CFBenchError, RuntimeError):
    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"no convergence after {iterations} iterations (residual {residual:.3e})")


class UndefinedMetricError(CFBenchError, ValueError):
    pass


class DatasetMissingError(CFBenchError, FileNotFoundError):
    """A dataset named in a config or scenario has no files on disk."""


class FoldFailedError(CFBenchError, RuntimeError):
    def __init__(self, fold, cause):
        self.fold = fold
        super().__init__(f"fold {fold} failed: {type(cause).__name__}: {cause}")
