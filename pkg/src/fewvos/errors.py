"""Exception types shared across the package."""


class FewvosError(Exception):
    """Base class for package-specific failures."""


class TensorFormatError(FewvosError):
    """Raised when a tensor file does not conform to the FTS layout.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class EmptyForegroundError(FewvosError):
    """A mask or probability map that must contain foreground has none."""


class EmptySupportMaskError(FewvosError):
    """A support mask has no positive pixel, so no prototype can be pooled."""


class SamplingError(FewvosError):
    """Episode sampling could not satisfy one of its constraints."""


class NoKeyframeError(FewvosError):
    """Every frame signature degenerated, so no keyframe can be selected."""


class NonFiniteLossError(FewvosError):
    """The optimization produced a non-finite loss or gradient."""


class ConfigError(FewvosError):
    """A run configuration violates one of its invariants."""
