"""A priori sparse linear cascades: topology generators, sparse Xavier init,
reconstruction training, matching bounds and a controllability heuristic."""

__version__ = "0.1.0"
