"""Lifelong imitation learning with a progressive low-rank expert library.

A frozen base policy is adapted per task by growing a library of low-rank
experts; a context-conditioned router mixes a sparse subset of experts per
policy submodule, and coefficient replay keeps the routing of earlier tasks
stable as the library grows.
"""

__version__ = "0.1.0"
