"""
Test suite for gmc-lab.

This package contains the unit tests for the kernel, sampler, chaos,
comparison and estimator modules and the command-line runner.
"""
