"""Setup configuration for the pytsr package."""

from setuptools import setup

# Configuration is primarily defined in pyproject.toml
# This file is kept for backwards compatibility
setup()
