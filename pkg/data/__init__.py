"""Synthetic dataset generators and their CLI entry point."""
