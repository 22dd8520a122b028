"""Graph-reranked dense retrieval fused into a staged early-exit reader,
with an instrumented FLOP cost model and a synthetic world generator."""

__version__ = "0.1.0"
