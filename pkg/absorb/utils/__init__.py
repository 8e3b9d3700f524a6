"""
Nothing to see here
"""
