class SynchronyError(Exception):
    """Base class for every error the lab raises on purpose."""
    exit_code = 1


# Input / parse failures (exit 2)

class InputError(SynchronyError):
    exit_code = 2


class GridParseError(InputError):
    pass


class GridValidationError(InputError):
    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class ParameterError(GridValidationError):
    pass


class TopologyError(GridValidationError):
    pass


class DatasetFormatError(InputError):
    pass


class NotADatasetError(DatasetFormatError):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


class TruncatedRecordError(DatasetFormatError):
    pass


class FingerprintCorruptionError(DatasetFormatError):
    pass


class CheckpointFormatError(InputError):
    pass


class ChecksumError(CheckpointFormatError):
    pass


class TrajectoryFormatError(InputError):
    pass


# Numerical failures (exit 3)

class NumericalError(SynchronyError):
    exit_code = 3


class NumericalBlowupError(NumericalError):
    def __init__(self, time):
        super().__init__(f"non-finite state at t={time:.6g} s")
        self.time = time


class EquilibriumNotFoundError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, epoch, batch):
        super().__init__(f"loss is not finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class ActivationError(NumericalError):
    def __init__(self, layer):
        super().__init__(f"non-finite activation after layer '{layer}'")
        self.layer = layer


# Contract / fingerprint failures (exit 4)

class ContractError(SynchronyError, ValueError):
    exit_code = 4


class ShapeError(ContractError):
    pass


class FingerprintMismatchError(ContractError):
    pass
