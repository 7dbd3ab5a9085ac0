"""
labelnav: zero-shot object navigation towards unlabeled targets in a
deterministic grid world.
"""

__version__ = '0.1.0'
