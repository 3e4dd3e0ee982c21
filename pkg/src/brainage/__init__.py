"""Brain age estimation from regional volumes, with site harmonization and group statistics."""

__version__ = "0.1.0"
