"""Exception types raised across the package."""


class CosectError(Exception):
    """Base class for all package errors."""


class InvalidDepth(CosectError):
    pass


class MissingPose(CosectError):
    pass


class MalformedDataset(CosectError):
    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class ShapeMismatch(CosectError):
    pass


class Divergence(CosectError):
    pass


class BadResolution(CosectError):
    pass


class EmptyMesh(CosectError):
    def __init__(self, role="mesh"):
        self.role = role
        super().__init__(f"{role} is empty")


class MalformedMeshFile(CosectError):
    pass
