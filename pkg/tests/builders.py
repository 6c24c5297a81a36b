"""Small hand-sized model inputs shared by several test modules."""
import numpy as np

from idfree.model import ModelInputs
from idfree.sparse import SparseCSR


def tiny_inputs(rng, nu=3, ni=2, dt=4, dv=5):
    r = np.array([[1, 0], [1, 1], [0, 1]], dtype=float)[:nu, :ni]
    text = rng.standard_normal((nu + ni, dt))
    visual = rng.standard_normal((nu + ni, dv))
    ru = rng.random((nu, nu)) * (1 - np.eye(nu))
    ri = rng.random((ni, ni)) * (1 - np.eye(ni))
    inputs = ModelInputs(nu, ni, text, visual, SparseCSR.from_dense(r), SparseCSR.from_dense(ru),
                         SparseCSR.from_dense(ri), np.zeros(nu, dtype=bool))
    return inputs, r, ru, ri


def synthetic_inputs(syn, k=10):
    """Model inputs for a :class:`idfree.synthetic.SyntheticData` instance."""
    from idfree.model import build_inputs
    return build_inputs(syn.data, syn.item_text, syn.item_visual, k)
