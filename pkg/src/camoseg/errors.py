"""Exception types shared across the package."""


class CamoSegError(Exception):
    pass


class ConfigError(CamoSegError, ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class ShapeError(CamoSegError, ValueError):
    pass


class DomainError(CamoSegError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class DataError(CamoSegError):
    """Problems with dataset files or contents (CLI exit code 3)."""


class SchemaError(DataError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class EmptyDatasetError(DataError):
    pass


class UndefinedAPError(DataError):
    """Raised when AP is requested over a dataset with no ground truth."""


class TrainingDivergedError(CamoSegError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
