"""Exception hierarchy shared by every subsystem."""


class SketchSceneError(Exception):
    """Base class for all package errors."""


class CodecError(SketchSceneError):
    pass


class VocabularyError(SketchSceneError):
    pass


class CapacityError(SketchSceneError):
    pass


class EmptySceneError(SketchSceneError):
    pass


class PlacementError(SketchSceneError):
    pass


class MaskingError(SketchSceneError):
    pass


class BuildError(SketchSceneError):
    pass


class ShapeError(SketchSceneError, ValueError):
    pass


class ChannelCountError(ShapeError):
    pass


class ScheduleError(SketchSceneError):
    pass


class StepRangeError(SketchSceneError, IndexError):
    pass


class SamplerDivergenceError(SketchSceneError):
    def __init__(self, step, norm):
        super().__init__(f"sampler diverged at step {step}: |O_t| = {norm:.3g}")
        self.step = step
        self.norm = norm


class StageError(SketchSceneError):
    """Non-finite intermediate inside the denoiser; ``stage`` names where."""

    def __init__(self, stage):
        super().__init__(f"non-finite values produced in stage '{stage}'")
        self.stage = stage


class MetricError(SketchSceneError):
    pass


class CheckpointError(SketchSceneError):
    pass


class ConfigError(SketchSceneError):
    pass
