"""Minimal numpy-only stand-in for the parts of scikit-learn the fixtures use."""
