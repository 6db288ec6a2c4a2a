"""Shape-completion driven next-best-view planning for fruit mapping."""

__version__ = "0.1.0"
