"""Error hierarchy; exit codes match the engine's CLI convention."""


class BridgeError(Exception):
    exit_code = 1


class JobError(BridgeError):
    """Bad job description: unknown backbone, bad selector, bad crop spec."""

    exit_code = 2


class ImageError(BridgeError):
    """Unreadable image file or crop outside the image bounds."""

    exit_code = 3
