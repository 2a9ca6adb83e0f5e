"""
cmdp-lab Package
================

Offline constrained-MDP optimization toolkit: exact LP oracles, offline
dataset samplers, the deviation-controlled primal-dual learner, statistical
verification, the adaptive deviation-control driver and hard benchmark
instances.
"""

__version__ = "1.0.0"
__author__ = "cmdp-lab Development Team"
