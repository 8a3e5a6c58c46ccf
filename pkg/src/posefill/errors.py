"""Exception types. All subclass ValueError so callers can catch broadly."""


class PosefillError(ValueError):
    pass


class InvalidArgument(PosefillError):
    pass


class InvalidStep(PosefillError):
    pass


class InvalidStepPair(PosefillError):
    pass


class UnsupportedSchedule(PosefillError):
    pass


class InvalidMask(PosefillError):
    pass


class InvalidShape(PosefillError):
    pass


class InvalidRegion(PosefillError):
    pass


class InvalidDataset(PosefillError):
    pass


class ModelContractViolation(PosefillError):
    pass


class MigrationError(PosefillError):
    pass


class CheckpointError(PosefillError):
    pass


class ValidationError(PosefillError):
    pass
