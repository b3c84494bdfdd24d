"""Filter-resistant face recognition and selfie-filter impact analysis."""

__version__ = "0.1.0"
