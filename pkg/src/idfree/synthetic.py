"""Planted two-community datasets for desk-scale checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import FeatureMatrix, InteractionSet, build_splits


@dataclass
class SyntheticData:
    data: InteractionSet
    item_text: FeatureMatrix
    item_visual: FeatureMatrix
    user_community: np.ndarray
    item_community: np.ndarray


def two_community(n_users: int = 200, n_items: int = 100, dim: int = 16, noise: float = 0.1,
                  p_in: float = 0.3, p_out: float = 0.01, seed: int = 0,
                  split_seed: int | None = None,
                  feature_seed: int | None = None) -> SyntheticData:
    """Users and items split evenly into two communities.

    Each community has one text centroid and one visual centroid (standard
    normal, ``dim`` wide); an item's features are its community centroids plus
    N(0, noise^2) per coordinate.  A user interacts with each same-community
    item with probability ``p_in`` and each other item with ``p_out``.
    Community membership is assigned by random permutation, so it is not
    encoded in the index order.

    ``feature_seed`` draws the centroids from their own stream.  Two datasets
    with the same ``feature_seed`` live in one feature space, as if both
    catalogues had been embedded by the same encoders, while their users,
    items and interactions still differ.
    """
    rng = np.random.default_rng(seed)
    ucom = rng.permutation(np.arange(n_users) % 2)
    icom = rng.permutation(np.arange(n_items) % 2)
    crng = rng if feature_seed is None else np.random.default_rng([feature_seed, 0xCE])
    text_c = crng.standard_normal((2, dim))
    vis_c = crng.standard_normal((2, dim))
    text = text_c[icom] + noise * rng.standard_normal((n_items, dim))
    vis = vis_c[icom] + noise * rng.standard_normal((n_items, dim))
    prob = np.where(ucom[:, None] == icom[None, :], p_in, p_out)
    hit = rng.random((n_users, n_items)) < prob
    # every user needs at least one interaction to exist in the log
    for u in np.flatnonzero(~hit.any(axis=1)):
        hit[u, rng.choice(np.flatnonzero(icom == ucom[u]))] = True
    us, its = np.nonzero(hit)
    pairs = [(str(u), str(i)) for u, i in zip(us, its)]
    data = build_splits(pairs, seed=seed if split_seed is None else split_seed,
                        item_ids=[str(i) for i in range(n_items)])
    # users enter the id map in numeric order, matching ucom
    return SyntheticData(data, FeatureMatrix("text", text.astype(np.float32)),
                         FeatureMatrix("visual", vis.astype(np.float32)), ucom, icom)
