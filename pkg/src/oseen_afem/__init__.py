"""Adaptive stabilized finite elements for control-constrained Oseen flow."""
