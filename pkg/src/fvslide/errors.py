"""Exception hierarchy.

Every error raised on purpose by the package derives from ``FvSlideError``.
The ``exit_code`` attribute is what the command line reports when the error
escapes a subcommand (2 = I/O, 3 = configuration, 4 = runtime numeric).
"""


class FvSlideError(Exception):
    exit_code = 4


class SlideIOError(FvSlideError):
    exit_code = 2


class MissingTile(SlideIOError):
    def __init__(self, path, level=None, col=None, row=None):
        self.path = str(path)
        self.level, self.col, self.row = level, col, row
        super().__init__(f"missing tile level={level} col={col} row={row}: {self.path}")


class MalformedManifest(FvSlideError):
    exit_code = 3

    def __init__(self, field, reason):
        self.field = field
        self.reason = reason
        super().__init__(f"malformed manifest field {field!r}: {reason}")


class OutOfBounds(FvSlideError):
    pass


class ConfigError(FvSlideError):
    exit_code = 3


class ShapeMismatch(FvSlideError):
    pass


class EmptyCandidateSet(FvSlideError):
    pass


class InconsistentDimension(FvSlideError):
    exit_code = 3


class MalformedRow(FvSlideError):
    exit_code = 3

    def __init__(self, line, reason):
        self.line = line
        super().__init__(f"line {line}: {reason}")


class InsufficientData(FvSlideError):
    pass


class EmptyDescriptorSet(FvSlideError):
    pass


class SingleClassDataset(FvSlideError):
    pass


class NonFiniteLoss(FvSlideError):
    def __init__(self, epoch, slide=None):
        self.epoch = epoch
        self.slide = slide
        super().__init__(f"non-finite loss at epoch {epoch}" + (f" (slide {slide})" if slide is not None else ""))


class LengthMismatch(FvSlideError):
    pass


class SingleClassLabels(FvSlideError):
    pass


class InsufficientCenters(FvSlideError):
    exit_code = 3
