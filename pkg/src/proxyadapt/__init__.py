"""Proxy-then-true preference learning on finite prompt/response spaces."""

__version__ = "0.1.0"
