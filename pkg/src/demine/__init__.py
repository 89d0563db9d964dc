"""Pattern-based landmine risk mapping and clearance simulation toolkit."""

__version__ = "0.1.0"
