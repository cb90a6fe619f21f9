"""Task planning and simulation for human-robot collaborative assembly."""

__version__ = "0.1.0"
