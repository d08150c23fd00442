"""Exception types raised across the package.

Every error carries enough context in its message to identify the offending
input; callers that can recover (e.g. dropping a degenerate loss term) catch
the specific class, never the base class.
"""


class RenderfitError(Exception):
    """Base class for all package errors."""


class DegenerateRotation(RenderfitError):
    """The two 6D-rotation basis vectors are parallel or near zero."""


class BehindCamera(RenderfitError):
    """Attempted to project a point at or behind the camera plane."""


class EmptyMesh(RenderfitError):
    """Mesh has no faces."""


class EmptyCloud(RenderfitError):
    """Backprojection or chamfer received/produced no points."""


class EmptyRegion(RenderfitError):
    """A mask has an empty positive or negative region."""


class EmptyList(RenderfitError):
    """A batch metric received no estimates."""


class EmptyRendering(RenderfitError):
    """Scene synthesis produced no foreground pixels."""


class TooSmall(RenderfitError):
    """Image resolution insufficient for the requested number of scales."""


class ShapeMismatch(RenderfitError):
    """Array dimensions disagree."""


class MissingDepth(RenderfitError):
    """Depth-dependent loss requested on a frame without depth."""


class NoOverlap(RenderfitError):
    """Initial pose renders with no overlap against the pseudo visible mask."""


class NonFiniteLoss(RenderfitError):
    """Loss or gradient became NaN/Inf during refinement."""


class LengthMismatch(RenderfitError):
    """Parameter vectors of unequal length."""


class ConfigError(RenderfitError):
    """Configuration file failed validation; message names the bad key."""
