"""Canned experiment configurations."""
