class SplatforgeError(Exception):
    """Base class for errors raised by this package."""


class SchemaError(SplatforgeError):
    """A file or record does not match its documented format."""


class BehindCameraError(SplatforgeError):
    """Point projects behind the near plane; caller should mark it invisible."""
