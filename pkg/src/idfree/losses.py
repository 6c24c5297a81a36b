"""Alignment (InfoNCE) and recommendation (softmax) objectives."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sparse import SparseCSR

log = logging.getLogger(__name__)

LOSS_MODES = ("sampled", "literal")


@dataclass
class LossReport:
    l_align_user: float
    l_align_item: float
    l_rec: float
    l_total: float
    batch_size: int
    tau: float

    @property
    def l_align(self) -> float:
        return self.l_align_user + self.l_align_item

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TripletBatch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self):
        return len(self.users)


def cosine_matrix(a, b) -> Tensor:
    """All-pairs cosine similarity; rows of zero norm give 0."""
    return ad.matmul(ad.normalize_rows(a), ad.transpose(ad.normalize_rows(b)))


def _row_cos(a, b) -> Tensor:
    return ad.sum(ad.mul_elem(ad.normalize_rows(a), ad.normalize_rows(b)), axis=1)


def infonce_align(anchor, target, tau: float) -> Tensor:
    """Mean over rows of ``-log softmax_j(cos(anchor_u, target_j)/tau)[u]``.

    Each anchor row is pulled toward the same row of ``target``; every other
    target row in the batch is a negative.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    anchor, target = ad.as_tensor(anchor), ad.as_tensor(target)
    if anchor.shape != target.shape or anchor.shape[0] < 1:
        raise ValueError(f"anchor/target shapes differ or are empty: {anchor.shape}, {target.shape}")
    logits = ad.scale(cosine_matrix(anchor, target), 1.0 / tau)
    diag = ad.sum(ad.mul_elem(logits, ad.constant(np.eye(anchor.shape[0]))), axis=1)
    return ad.mean(ad.sub(ad.logsumexp(logits), diag))


def symmetric_infonce(a, b, tau: float) -> Tensor:
    return ad.scale(ad.add(infonce_align(a, b, tau), infonce_align(b, a, tau)), 0.5)


def softmax_rec_loss(e_u, e_pos, e_neg, tau: float, mode: str = "sampled") -> Tensor:
    """Recommendation loss over a batch of triplets.

    ``sampled``: each user's candidates are its positive, the other rows'
    positives (in-batch negatives) and its own sampled negative; the loss is
    the mean cross-entropy of picking the positive.  ``literal``: the mean of
    ``-(cos(u, i+) - cos(u, i-)) / tau``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    e_u, e_pos, e_neg = ad.as_tensor(e_u), ad.as_tensor(e_pos), ad.as_tensor(e_neg)
    pos = ad.scale(_row_cos(e_u, e_pos), 1.0 / tau)
    if mode == "literal":
        neg = ad.scale(_row_cos(e_u, e_neg), 1.0 / tau)
        return ad.mean(ad.sub(neg, pos))
    if mode != "sampled":
        raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {mode!r}")
    b = e_u.shape[0]
    in_batch = ad.scale(cosine_matrix(e_u, e_pos), 1.0 / tau)             # B x B
    own_neg = ad.scale(_row_cos(e_u, e_neg), 1.0 / tau)
    # candidates per row: every positive in the batch, then the row's own negative
    logits = ad.transpose(ad.concat_rows([ad.transpose(in_batch), ad.reshape(own_neg, (1, b))]))
    return ad.mean(ad.sub(ad.logsumexp(logits), pos))


def total_loss(l_rec, l_align) -> Tensor:
    return ad.add(l_rec, l_align)


def sample_triplets(r_train: SparseCSR, batch_size: int, rng: np.random.Generator,
                    max_rounds: int = 100) -> TripletBatch:
    """Uniform positive pairs; negatives uniform over the user's
    non-interacted items (rejection sampling)."""
    if r_train.nnz == 0:
        raise ValueError("cannot sample from an empty interaction matrix")
    n_items = r_train.n_cols
    rows = r_train.row_ids()
    full = r_train.row_nnz() >= n_items
    if np.any(full[rows]):
        log.warning("%d user(s) interacted with every item; skipped", int(full.sum()))
    pick = rng.integers(0, r_train.nnz, size=batch_size)
    pick = pick[~full[rows[pick]]]
    users, pos = rows[pick], r_train.col_idx[pick]
    known = rows * n_items + r_train.col_idx      # sorted, since CSR is canonical
    neg = rng.integers(0, n_items, size=len(users))
    for _ in range(max_rounds):
        codes = users * n_items + neg
        hit = np.searchsorted(known, codes)
        bad = (hit < len(known)) & (known[np.minimum(hit, len(known) - 1)] == codes)
        if not bad.any():
            break
        neg[bad] = rng.integers(0, n_items, size=int(bad.sum()))
    else:
        raise RuntimeError("negative sampling did not converge")
    return TripletBatch(users, pos, neg)


def compute_losses(bundle, batch: TripletBatch, tau: float, mode: str = "sampled",
                   use_align: bool = True, symmetric_align: bool = False):
    """Batch objective from a forward bundle.  Returns (total tensor, report)."""
    nu = bundle.n_users
    E = bundle.E
    e_u = ad.row_gather(E, batch.users)
    e_pos = ad.row_gather(E, nu + batch.pos_items)
    e_neg = ad.row_gather(E, nu + batch.neg_items)
    l_rec = softmax_rec_loss(e_u, e_pos, e_neg, tau, mode)
    zero = ad.constant(0.0)
    l_u = l_i = zero
    if use_align:
        align = symmetric_infonce if symmetric_align else infonce_align
        users = np.unique(batch.users)
        items = nu + np.unique(batch.pos_items)
        l_u = align(ad.row_gather(bundle.ht_tilde, users), ad.row_gather(bundle.hv_tilde, users), tau)
        l_i = align(ad.row_gather(bundle.ht_tilde, items), ad.row_gather(bundle.hv_tilde, items), tau)
    total = total_loss(l_rec, ad.add(l_u, l_i))
    lu, li, lr = float(l_u.value), float(l_i.value), float(l_rec.value)
    report = LossReport(lu, li, lr, lr + (lu + li), len(batch), tau)
    return total, report
