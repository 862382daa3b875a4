class VoxflowError(Exception):
    """Base class for all errors raised by this project"""


class ContractError(VoxflowError, ValueError):
    """A caller violated an operation's precondition (shape, length, range)"""


class GridRangeError(ContractError):
    """A voxel coordinate falls outside the tree's addressable span"""

    def __init__(self, coord, span):
        self.coord = tuple(int(v) for v in coord)
        self.span = int(span)
        super().__init__(f"Coordinate {self.coord} outside addressable span ±{self.span}")


class FormatError(ContractError):
    """A file does not match the format its reader expects"""


class HierarchyError(ContractError):
    """A fine voxel has no active ancestor at a coarser level"""


class MissingArtifactError(ContractError):
    """An input file or checkpoint the command needs does not exist"""

    def __init__(self, artifact, path):
        self.artifact = artifact
        self.path = str(path)
        super().__init__(f"Missing {artifact}: {self.path}")


class NumericFailure(VoxflowError, RuntimeError):
    """Training produced a non-finite loss"""

    def __init__(self, message, dump_path=None):
        self.dump_path = str(dump_path) if dump_path else None
        if self.dump_path:
            message = f"{message} (batch dumped to {self.dump_path})"
        super().__init__(message)


class SamplingFailure(VoxflowError, RuntimeError):
    """The cascade decoded an empty grid at some level"""

    def __init__(self, level, message=None):
        self.level = int(level)
        super().__init__(message or f"Decoder pruned every voxel at level {self.level}")
