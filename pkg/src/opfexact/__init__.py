"""Conic relaxations of AC optimal power flow with ex post exactness certificates."""

__version__ = "0.1.0"
