"""Padé approximant neurons and the PadéNet super-resolution pipeline."""

__version__ = "0.1.0"
