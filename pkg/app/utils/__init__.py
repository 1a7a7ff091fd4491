"""
Utils package for document entity classification.
"""
