"""Scenario downscaling of country population and GDP to grid cells."""

__version__ = "0.1.0"
