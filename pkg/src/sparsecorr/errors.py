"""Exception hierarchy.

Every error carries a dotted ``code`` (the machine-parsable class printed by
the CLI) and an ``exit_code``: 2 for I/O, 3 for configuration, 4 for numeric
failures.
"""


class SparseCorrError(Exception):
    code = "internal"
    exit_code = 4

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class InputError(SparseCorrError):
    code = "io.error"
    exit_code = 2


class MeshFormatError(InputError):
    code = "io.parse"


class DegenerateFaceError(InputError):
    code = "io.degenerate_faces"

    def __init__(self, faces, message=None):
        self.faces = list(faces)
        shown = ", ".join(str(f) for f in self.faces[:10])
        more = "" if len(self.faces) <= 10 else f" (+{len(self.faces) - 10} more)"
        super().__init__(message or f"degenerate faces: {shown}{more}")


class ConfigError(SparseCorrError):
    code = "config.invalid"
    exit_code = 3


class NumericalError(SparseCorrError):
    code = "numeric.failure"
    exit_code = 4


class InfeasiblePatternError(NumericalError):
    code = "qap.infeasible"

    def __init__(self, rows=(), cols=(), message=None):
        self.rows = list(rows)
        self.cols = list(cols)
        super().__init__(
            message
            or f"infeasible sparsity pattern: empty rows {self.rows[:10]}, empty columns {self.cols[:10]}"
        )


class DivergenceError(NumericalError):
    code = "qap.diverged"


class EmptyAnchorSetError(NumericalError):
    code = "pipeline.no_anchors"


class HKSUnavailableError(NumericalError):
    code = "descriptors.hks_size_limit"


class FragmentationError(SparseCorrError):
    code = "synth.fragmented"
    exit_code = 4


class CollinearNeighborhoodError(NumericalError):
    code = "pointcloud.collinear"


class BadIndexError(InputError):
    code = "eval.bad_index"
