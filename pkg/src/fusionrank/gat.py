"""Graph-attention reranker over per-passage feature vectors.

Each layer projects node features per head, scores node pairs with a
LeakyReLU additive attention, softmax-normalizes over the neighborhood
(self-loop always included), aggregates, concatenates heads, and adds a
residual; ELU between layers. With ``use_graph=False`` the adjacency is
self-loops only, which collapses the layer to a per-node MLP — the
edges-removed ablation, parameter-for-parameter identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PassageGraph
from .params import ParameterSet
from .tensor import ShapeError, Tensor, add, concat, elu, leaky_relu, masked_softmax, matmul, reshape, swapaxes


@dataclass
class RerankerConfig:
    width: int
    n_layers: int = 3
    n_heads: int = 2
    leaky_slope: float = 0.2
    use_graph: bool = True

    def __post_init__(self):
        if self.n_layers > 0 and self.width % self.n_heads != 0:
            raise ShapeError(f"heads {self.n_heads} must divide width {self.width}")


class GatReranker:
    def __init__(self, cfg: RerankerConfig, seed: int = 0,
                 params: ParameterSet | None = None, prefix: str = "gat"):
        self.cfg = cfg
        self.params = ParameterSet(seed) if params is None else params
        self.prefix = prefix
        d_head = cfg.width // cfg.n_heads if cfg.n_layers > 0 else cfg.width
        for layer in range(cfg.n_layers):
            for head in range(cfg.n_heads):
                base = f"{prefix}.l{layer}.h{head}"
                self.params.add(f"{base}.w", (cfg.width, d_head))
                self.params.add(f"{base}.a_src", (d_head, 1), fan_in=d_head)
                self.params.add(f"{base}.a_dst", (d_head, 1), fan_in=d_head)

    def adjacency(self, n_nodes: int, graph: PassageGraph | None) -> np.ndarray:
        adj = np.eye(n_nodes, dtype=bool)
        if self.cfg.use_graph and graph is not None:
            if graph.n_nodes != n_nodes:
                raise ShapeError(f"graph has {graph.n_nodes} nodes, features have {n_nodes}")
            for i, j in graph.edges:
                adj[i, j] = True
                adj[j, i] = True
        return adj

    def forward(self, feats: Tensor, graph: PassageGraph | None) -> Tensor:
        """L rounds of masked attention aggregation over neighbors + self."""
        if feats.ndim != 2 or feats.shape[1] != self.cfg.width:
            raise ShapeError(f"expected [n, {self.cfg.width}] features, got {feats.shape}")
        n = feats.shape[0]
        adj = self.adjacency(n, graph)
        x = feats
        for layer in range(self.cfg.n_layers):
            heads = []
            for head in range(self.cfg.n_heads):
                base = f"{self.prefix}.l{layer}.h{head}"
                z = matmul(x, self.params[f"{base}.w"])
                src = matmul(z, self.params[f"{base}.a_src"])  # [n, 1]
                dst = matmul(z, self.params[f"{base}.a_dst"])  # [n, 1]
                logits = leaky_relu(add(src, swapaxes(dst, 0, 1)), self.cfg.leaky_slope)
                alpha = masked_softmax(logits, adj)
                heads.append(matmul(alpha, z))
            x = add(x, concat(heads, axis=-1))
            if layer < self.cfg.n_layers - 1:
                x = elu(x)
        return x


def score_nodes(node_states: Tensor, query_vec: Tensor) -> Tensor:
    """Per-node score: dot product of each node state with a query vector."""
    q = reshape(query_vec, (query_vec.shape[-1], 1))
    return reshape(matmul(node_states, q), (node_states.shape[0],))
