"""Similarity graphs, the gated edge weights and the augmented adjacency.

Run:  python demos/02_graphs.py
"""
import numpy as np

from idfree import autodiff as ad
from idfree import simgraph
from idfree.model import propagate
from idfree.sparse import SparseCSR

rng = np.random.default_rng(1)

# Six items in two tight groups.  Each item keeps its two most cosine-similar
# neighbours; negative similarities are clamped to zero after selection.
centres = rng.standard_normal((2, 5))
items = centres[[0, 0, 0, 1, 1, 1]] + 0.05 * rng.standard_normal((6, 5))
knn = simgraph.cosine_topk(items, k=2).csr
print("item kNN graph (k=2):\n", np.round(knn.to_dense(), 3))

# The text graph and the visual graph are summed into one item graph.
visual = centres[[0, 0, 0, 1, 1, 1]] @ rng.standard_normal((5, 5))
item_graph = simgraph.fuse_modal_graphs(knn, simgraph.cosine_topk(visual, k=2).csr)

# A learned gate rescales each edge by sigmoid(<relu(h_a W0 + b0), relu(h_b W1 + b1)>).
d = 4
gate = {"W0": rng.standard_normal((d, d)), "W1": rng.standard_normal((d, d)),
        "b0": np.zeros(d), "b1": np.zeros(d)}
h_text, h_visual = rng.standard_normal((2, 6, d))
gated = simgraph.adaptive_weights(item_graph, h_text, h_visual, gate).detach()
print("gated weights never exceed the input weights:",
      bool(np.all(gated.vals <= item_graph.vals + 1e-6)))

# Interactions for three users, then the block adjacency [[R_U, R], [R^T, R_I]].
r = SparseCSR.from_dense([[1, 1, 0, 0, 0, 0], [0, 0, 0, 1, 1, 0], [0, 1, 0, 0, 0, 1]])
user_graph = SparseCSR.from_dense([[0, 0.5, 0], [0.5, 0, 0], [0, 0, 0]])
aug = simgraph.assemble_augmented(r, user_graph, gated)
a_hat = simgraph.laplacian_normalize(aug.A)
print("augmented adjacency:", a_hat.shape, "nnz", a_hat.nnz)

# Edge dropout keeps ceil((1 - rho) * nnz) interactions, drawn in proportion
# to their normalised weight, and redrawn every epoch.
kept = simgraph.denoise_interactions(r, rho=0.5, rng=np.random.default_rng(0))
print("interactions kept at rho=0.5:", kept.nnz, "of", r.nnz)

# Propagation averages A_hat^l H0 over layers 1..L.
h0 = rng.standard_normal((9, d))
with ad.precision(64):
    e = propagate(a_hat, h0, layers=3).value
print("propagated embeddings:", e.shape)
