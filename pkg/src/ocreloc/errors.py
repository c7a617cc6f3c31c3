"""Exception types raised by ocreloc."""


class OcrelocError(Exception):
    """Base class for all package errors."""


class GeometryError(OcrelocError, ValueError):
    def __init__(self, message: str, kind: str = "invalid"):
        super().__init__(message)
        self.kind = kind


class NotVisibleError(GeometryError):
    def __init__(self, message: str = "point not visible"):
        super().__init__(message, kind="not_visible")


class DescriptorError(OcrelocError, ValueError):
    pass


class RankError(DescriptorError):
    pass


class MapFormatError(OcrelocError):
    pass


class ChecksumError(MapFormatError):
    pass


class TruncatedFileError(MapFormatError):
    pass


class VersionMismatchError(MapFormatError):
    pass


class IngestError(OcrelocError):
    def __init__(self, message: str, path=None, lineno=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if lineno is not None:
                where += f":{lineno}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.lineno = lineno


class UnsupportedCameraModel(IngestError):
    pass


class EmptyMapError(OcrelocError):
    pass


class PnPError(OcrelocError, ValueError):
    pass


class NoHypothesisError(OcrelocError):
    pass


class EmptyVisibleSetError(OcrelocError):
    pass


class UnstableUncertaintyError(OcrelocError):
    pass


class EvaluationError(OcrelocError):
    pass


class ConfigError(OcrelocError):
    pass
