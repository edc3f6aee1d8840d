"""Exception hierarchy.

Every failure the library can produce on purpose derives from HandfitError,
split into three branches so callers (CLI, service) can map them to exit
codes / HTTP statuses without string matching:

  * DataError        -- bad inputs: unreadable files, schema violations,
                        inconsistent shapes, unusable observations.
  * NumericalError   -- the math gave up: divergence, behind-camera
                        projection, degenerate geometry.
  * HandfitError     -- anything else we raise deliberately.
"""


class HandfitError(Exception):
    """Base class for all deliberate failures."""


class DataError(HandfitError):
    """Invalid or inconsistent input data."""


class SchemaError(DataError):
    """A file or payload does not match its declared format."""


class InvalidModel(DataError):
    """Model file fails structural validation (shapes, weights, regressor)."""


class NonWatertight(InvalidModel):
    """Mesh topology is not closed: some edge is not shared by exactly two triangles."""


class InsufficientJoints(DataError):
    """Observation has fewer visible joints than the minimum needed to fit."""


class NumericalError(HandfitError):
    """A computation failed for numerical reasons."""


class BehindCamera(NumericalError):
    """A projected point has non-positive depth in camera coordinates."""


class Diverged(NumericalError):
    """Optimization produced non-finite loss or gradient and could not recover."""


class DegenerateConfiguration(NumericalError):
    """Geometry too degenerate to process (zero-area triangles, coincident points)."""
