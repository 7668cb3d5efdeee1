"""Time-splitting FEM and multiscale FEM for the semiclassical cubic Schroedinger equation
with random potentials."""

__version__ = "0.1.0"
