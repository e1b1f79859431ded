"""Data formats, importers and the synthetic scene generator."""
