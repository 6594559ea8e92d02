"""drivemap: reconstruct driving logs into road meshes and 3D vector maps."""

__version__ = "0.1.0"
