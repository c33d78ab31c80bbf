"""
Encoding a binding pocket from scalar geometry only
===================================================

A pocket is a set of residues with alpha-carbon coordinates. The encoder
never consumes raw coordinates: every feature is a distance, a separation,
or an angle between local frame vectors, so rotating or translating the
pocket cannot change the embedding. This script shows that directly.
"""

import numpy as np

from pocketgfn.autodiff import Tape
from pocketgfn.nn import ParamStore
from pocketgfn.pocket import (
    build_knn_graph,
    encode_pocket,
    radius_of_gyration,
    random_rotation,
    synthetic_pocket,
    transform_residues,
)

# a synthetic 12-residue pocket and its K-nearest-neighbor graph
residues = synthetic_pocket(12, spread=3.0, seed=7, polar_fraction=0.4)
graph = build_knn_graph(residues)
print(f"{graph.n} residues, radius of gyration {radius_of_gyration(graph.coords):.3f}")
print("neighbor list shape:", graph.neighbor_idx.shape)

store = ParamStore(np.random.default_rng(1))
with Tape():
    emb = encode_pocket(graph, store, L_layers=2, c_pocket=16)
print("node embeddings:", emb.node_embeddings.shape, " pooled:", emb.pooled.shape)

# now hit the pocket with a random rigid motion and encode again
rng = np.random.default_rng(2)
moved = transform_residues(residues, random_rotation(rng), rng.normal(size=3) * 20.0)
moved_graph = build_knn_graph(moved)
with Tape():
    emb2 = encode_pocket(moved_graph, store, L_layers=2, c_pocket=16)

drift = np.max(np.abs(emb.node_embeddings.data - emb2.node_embeddings.data))
print(f"max embedding drift after rotation + 20-unit translation: {drift:.2e}")
print("coordinates moved, distances did not:",
      np.allclose(graph.dist_matrix, moved_graph.dist_matrix))
