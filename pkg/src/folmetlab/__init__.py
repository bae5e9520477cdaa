"""Numerical laboratory for leafwise hyperbolic metrics of holomorphic foliations on exhausting domains."""

__version__ = "0.1.0"
