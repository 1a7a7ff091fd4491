"""
Document entity classification package.
"""

__version__ = '1.0.0'
