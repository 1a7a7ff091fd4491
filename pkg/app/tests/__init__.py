"""
Tests package for document entity classification.
"""
