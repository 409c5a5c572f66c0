"""Emotional-prosody backdoor lab for closed-set speaker identification."""

__version__ = "0.1.0"
