"""
Unit tests package for mpthcl.
"""
