"""HTTP service wrapper around the round runners."""

from .app import create_app

__all__ = ["create_app"]
