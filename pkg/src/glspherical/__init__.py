"""Spherical functions on GL_n(F) over U_n(F), moment functions and biinvariant random walks."""

__version__ = "0.1.0"
