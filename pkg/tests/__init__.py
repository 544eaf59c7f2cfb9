"""
VEM Solver Tests

Set VEM_SLOW_TESTS=1 to include the full-length benchmark evolutions.
"""
