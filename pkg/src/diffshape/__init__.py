"""Geometric statistics of corresponded triangle meshes in differential-coordinates shape space."""
__version__ = "0.1.0"
