"""
Services package for document entity classification.
"""
