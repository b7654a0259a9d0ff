"""Tests for the pixelcontrast package."""
