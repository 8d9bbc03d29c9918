"""Test package for vidssl."""
