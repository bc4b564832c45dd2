"""Offline test doubles: the scriptable stub runner."""
