"""Exception types raised across the package."""


class RosluError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ConfigError(RosluError, ValueError):
    pass


class ShapeError(RosluError, ValueError):
    def __init__(self, kernel: str, *shapes, detail: str = ""):
        self.kernel = kernel
        self.shapes = shapes
        msg = f"{kernel}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(RosluError, RuntimeError):
    pass


class InputContractError(RosluError, ValueError):
    pass


class DataError(RosluError, ValueError):
    pass


class NoiseError(RosluError, RuntimeError):
    pass


class CheckpointError(RosluError, ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VocabMismatchError(CheckpointError):
    pass
