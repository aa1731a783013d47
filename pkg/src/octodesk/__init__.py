"""octodesk: desk-scale generalist-policy training testbed."""

__version__ = "0.1.0"
