"""Acceptance verdict lines, repeated in the terminal summary so they survive output capture."""
LINES = []
