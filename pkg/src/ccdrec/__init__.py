"""Teacher-student recommender pipeline over a non-stationary interaction stream.

A compact student model is distilled from a teacher ensemble once per data
block, kept fresh within the block through sub-block updates guarded by
stability/plasticity replay proxies, and its knowledge is transferred back
into the teacher when the block closes.
"""

__version__ = "0.1.0"
