"""Sequential clip-level video instance tracking on synthetic data.

Queries are propagated from clip to clip, so a query index is an object
identity for the whole video. Training binds newborn objects to free queries
with an occupancy-penalized Hungarian assignment.
"""

__version__ = "0.1.0"
