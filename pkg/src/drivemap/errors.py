"""Exception and warning types shared across the toolkit."""


class DrivemapError(Exception):
    """Base class for all toolkit errors."""


# -- geometry ---------------------------------------------------------------

class CheiralityError(DrivemapError):
    """A point lies behind (or on) the camera plane where positive depth is required."""


class NoFootprintError(DrivemapError):
    """No camera ray intersects the ground plane; the footprint is undefined."""


class DegenerateError(DrivemapError):
    """Geometric quantity undefined (e.g. coincident camera centers)."""


# -- pose-graph fusion ------------------------------------------------------

class GaugeError(DrivemapError):
    """The optimization problem is under-constrained (gauge freedom left)."""


class DivergenceError(DrivemapError):
    """Solver cost became non-finite."""


class OutOfRangeError(DrivemapError):
    """Query timestamp outside the trajectory span (beyond tolerance)."""


# -- structure from motion --------------------------------------------------

class LowParallaxError(DrivemapError):
    """Triangulation rejected: maximum pairwise ray angle below the gate."""


class HighResidualError(DrivemapError):
    """Triangulation rejected: reprojection error above the gate."""


class MissingRigError(DrivemapError):
    """A camera has no rig-frame assignment."""


class EmptyModelError(DrivemapError):
    """Filtering removed every landmark from the model."""


class DisjointModelsError(DrivemapError):
    """Models to merge share no cross-clip track links."""


class StationaryClipWarning(UserWarning):
    """Clip has (near-)zero baseline everywhere; no structure can be recovered."""


# -- road surface -----------------------------------------------------------

class EmptySurfaceError(DrivemapError):
    """Neither landmarks nor trajectory provide any surface points."""


class DegenerateExtentError(DrivemapError):
    """Surface points are collinear in x/y; elevation fit is ill-posed."""


class NoCameraError(DrivemapError):
    """Mesh painting requires at least one camera with masks."""


# -- vector map -------------------------------------------------------------

class OutOfBoundsError(DrivemapError):
    """Vertices fall outside the elevation field bounds."""

    def __init__(self, vertices):
        self.vertices = list(vertices)
        super().__init__(f"{len(self.vertices)} vertices outside field bounds: "
                         f"{self.vertices[:5]}{'...' if len(self.vertices) > 5 else ''}")


# -- evaluation -------------------------------------------------------------

class MissingInstanceError(DrivemapError):
    """Requested instance id not present in the mask."""


class NoFramesError(DrivemapError):
    """Metric evaluation needs at least one frame."""


# -- synthetic --------------------------------------------------------------

class InvalidSpecError(DrivemapError):
    """Scene specification violates its invariants."""
