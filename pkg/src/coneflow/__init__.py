"""Normalized Ricci flow on surfaces with cone points."""
