"""Desk-scale testbed for backdoor poisoning of CNN hotspot detectors and its augmentation defense."""

__version__ = "0.1.0"
