"""Full-ranking top-K retrieval and Recall@K / NDCG@K."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .sparse import SparseCSR

DEFAULT_KS = (5, 10, 20, 50)


@dataclass
class EvalReport:
    split: str
    ks: tuple
    recall: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    n_evaluated_users: int = 0

    def to_dict(self) -> dict:
        out = {"split": self.split, "n_evaluated_users": self.n_evaluated_users}
        for k in self.ks:
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        return out


def _unit(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def rank_items(E_U, E_I, exclude: SparseCSR | None, k_max: int, users=None,
               cosine: bool = False, block: int = 1024):
    """Top ``k_max`` items per user by dot-product (or cosine) score.

    Excluded items are never returned; ties go to the lower item index.
    Returns ``(ranked, short)``: an ``len(users) x k_max`` index array padded
    with -1, and a mask of users that had fewer than ``k_max`` candidates.
    """
    E_U = np.asarray(E_U, dtype=np.float64)
    E_I = np.asarray(E_I, dtype=np.float64)
    if cosine:
        E_U, E_I = _unit(E_U), _unit(E_I)
    users = np.arange(E_U.shape[0]) if users is None else np.asarray(users, dtype=np.int64)
    n_items = E_I.shape[0]
    k_eff = min(k_max, n_items)
    ranked = np.full((len(users), k_max), -1, dtype=np.int64)
    short = np.zeros(len(users), dtype=bool)
    for lo in range(0, len(users), block):
        ub = users[lo:lo + block]
        scores = E_U[ub] @ E_I.T
        n_ex = np.zeros(len(ub), dtype=np.int64)
        if exclude is not None and exclude.nnz:
            for j, u in enumerate(ub):
                cols, _ = exclude.row(u)
                scores[j, cols] = -np.inf
                n_ex[j] = len(cols)
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k_eff]
        avail = n_items - n_ex
        for j in range(len(ub)):
            m = min(k_eff, avail[j])
            ranked[lo + j, :m] = order[j, :m]
            short[lo + j] = avail[j] < k_max
    return ranked, short


def _truth_lists(truth) -> list:
    if isinstance(truth, SparseCSR):
        return [set(truth.row(u)[0].tolist()) for u in range(truth.n_rows)]
    return [set(t) for t in truth]


def recall_at_k(ranked, ground_truth, k: int) -> float:
    """Mean of |top-k ∩ truth| / |truth| over users with nonempty truth."""
    truth = _truth_lists(ground_truth)
    vals = []
    for row, t in zip(ranked, truth):
        if not t:
            continue
        hits = sum(1 for i in row[:k] if i in t)
        vals.append(hits / len(t))
    return math.fsum(vals) / len(vals) if vals else 0.0


def _idcg(n: int) -> float:
    return math.fsum(1.0 / math.log2(r + 1) for r in range(1, n + 1))


def ndcg_at_k(ranked, ground_truth, k: int) -> float:
    """Binary-relevance NDCG@k averaged over users with nonempty truth."""
    truth = _truth_lists(ground_truth)
    vals = []
    for row, t in zip(ranked, truth):
        if not t:
            continue
        dcg = math.fsum(1.0 / math.log2(r + 2) for r, i in enumerate(row[:k]) if i in t)
        vals.append(dcg / _idcg(min(k, len(t))))
    return math.fsum(vals) / len(vals) if vals else 0.0


def exclusion_for(data, split: str) -> SparseCSR:
    """Training items are always excluded; validation items too when scoring test."""
    if split == "test":
        return data.train + data.val
    return data.train


def evaluate_embeddings(E_U, E_I, data, split: str = "test", ks=DEFAULT_KS,
                        cosine: bool = False) -> EvalReport:
    truth = data.split(split)
    users = np.flatnonzero(truth.row_nnz() > 0)
    ks = tuple(sorted(ks))
    ranked, _ = rank_items(E_U, E_I, exclusion_for(data, split), max(ks), users, cosine)
    truth_rows = [set(truth.row(u)[0].tolist()) for u in users]
    rep = EvalReport(split, ks, n_evaluated_users=len(users))
    for k in ks:
        rep.recall[k] = recall_at_k(ranked, truth_rows, k)
        rep.ndcg[k] = ndcg_at_k(ranked, truth_rows, k)
    return rep


def popularity_report(data, split: str = "test", ks=DEFAULT_KS) -> EvalReport:
    """Rank every user's candidates by training-set item degree."""
    deg = data.train.col_counts().astype(np.float64)
    E_U = np.ones((data.n_users, 1))
    return evaluate_embeddings(E_U, deg[:, None], data, split, ks)


class DimensionError(ValueError):
    pass


def evaluate(checkpoint, data, item_text, item_visual, split: str = "test", ks=DEFAULT_KS,
             graphs: dict | None = None) -> EvalReport:
    """Score a checkpoint on ``data``.

    ``data`` may be a different dataset from the one the checkpoint was
    trained on; user features, positional tables and static graphs are all
    rebuilt for it.  Only the feature widths have to match.
    """
    from .model import ModelConfig, build_inputs, forward
    from .trainer import TrainConfig

    for name, want, got in (("text", checkpoint.text_dim, item_text.dim),
                            ("visual", checkpoint.visual_dim, item_visual.dim)):
        if want != got:
            raise DimensionError(f"{name} feature dim mismatch: checkpoint expects {want}, dataset has {got}")
    cfg = TrainConfig.from_dict(checkpoint.config)
    mc: ModelConfig = cfg.model_config()
    inputs = build_inputs(data, item_text, item_visual, mc.k, graphs)
    bundle = forward(checkpoint.params, inputs, mc, mode="infer")
    return evaluate_embeddings(bundle.E_U, bundle.E_I, data, split, ks,
                               cosine=cfg.scoring == "cosine")
