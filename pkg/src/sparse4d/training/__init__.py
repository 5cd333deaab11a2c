"""Synthetic scenes, losses, the optimization loop and evaluation."""
