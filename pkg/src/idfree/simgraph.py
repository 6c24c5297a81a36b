"""kNN similarity graphs, the augmented user-item adjacency, and its
normalisation and denoising.

Nodes of the augmented graph are laid out users first: user ``u`` is node
``u`` and item ``i`` is node ``n_users + i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, TracedCSR
from .sparse import SparseCSR

DEFAULT_BLOCK = 2048


@dataclass
class KnnGraph:
    n: int
    k: int
    csr: SparseCSR


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    out = np.zeros_like(x)
    nz = norm[:, 0] > 0
    out[nz] = x[nz] / norm[nz]
    return out


def cosine_topk(feats, k: int, block_size: int = DEFAULT_BLOCK) -> KnnGraph:
    """Keep each row's ``k`` most cosine-similar other rows.

    Similarities are computed ``block_size`` rows at a time.  Ties go to the
    lower column index.  Negative similarities are clamped to 0 after
    selection, and zero-norm rows have similarity 0 to everything.
    """
    x = getattr(feats, "data", feats)
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 2:
        raise ValueError("need at least two rows to build a similarity graph")
    k = min(k, n - 1)
    unit = _unit_rows(x)
    block_size = max(1, int(block_size))
    cols = np.empty((n, k), dtype=np.int64)
    vals = np.empty((n, k))
    for lo in range(0, n, block_size):
        hi = min(n, lo + block_size)
        sims = unit[lo:hi] @ unit.T
        sims[np.arange(hi - lo), np.arange(lo, hi)] = -np.inf
        top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        cols[lo:hi] = top
        vals[lo:hi] = np.take_along_axis(sims, top, axis=1)
    np.maximum(vals, 0.0, out=vals)
    rows = np.repeat(np.arange(n), k)
    return KnnGraph(n, k, SparseCSR.from_coo(rows, cols.ravel(), vals.ravel(), (n, n)))


def fuse_modal_graphs(g_t, g_v) -> SparseCSR:
    a = g_t.csr if isinstance(g_t, KnnGraph) else g_t
    b = g_v.csr if isinstance(g_v, KnnGraph) else g_v
    return a + b


def gate_embeddings(h_src: Tensor, h_dst: Tensor, gate: dict) -> tuple[Tensor, Tensor]:
    """Node-level halves of the adaptive gate: relu(h W0 + b0), relu(h W1 + b1)."""
    left = ad.relu(ad.add(ad.matmul(h_src, gate["W0"]), gate["b0"]))
    right = ad.relu(ad.add(ad.matmul(h_dst, gate["W1"]), gate["b1"]))
    return left, right


def adaptive_weights(graph: SparseCSR, h_text, h_visual, gate: dict,
                     pairing: str = "cross") -> TracedCSR:
    """Rescale every edge ``(a, b)`` by
    ``sigmoid(sum(relu(h_a W0 + b0) * relu(h_b W1 + b1)))``.

    With ``pairing="cross"`` the source endpoint uses its text embedding and
    the target its visual embedding; ``"same"`` uses text on both ends.  The
    result stays on the tape, so gradients reach the gate and the embeddings.
    """
    if pairing == "cross":
        h_src, h_dst = h_text, h_visual
    elif pairing == "same":
        h_src, h_dst = h_text, h_text
    else:
        raise ValueError(f"asg pairing must be 'cross' or 'same', got {pairing!r}")
    if ad.as_tensor(h_src).shape[0] != graph.n_rows:
        raise ValueError("embedding rows do not match graph size")
    gate = {k: ad.as_tensor(v) for k, v in gate.items()}
    left, right = gate_embeddings(h_src, h_dst, gate)
    src = ad.row_gather(left, graph.row_ids())
    dst = ad.row_gather(right, graph.col_idx)
    w = ad.sigmoid(ad.sum(ad.mul_elem(src, dst), axis=1))
    return TracedCSR(graph, ad.mul_elem(w, ad.constant(graph.vals)))


@dataclass
class AugmentedGraph:
    n_users: int
    n_items: int
    A: SparseCSR
    A_hat: SparseCSR | None = None

    @property
    def n_total(self) -> int:
        return self.n_users + self.n_items


def _check_blocks(r, ru, ri):
    nu, ni = r.shape
    if ru.shape != (nu, nu) or ri.shape != (ni, ni):
        raise ValueError(f"block shapes do not fit: R {r.shape}, R_U {ru.shape}, R_I {ri.shape}")


def block_layout(r: SparseCSR, ru: SparseCSR, ri: SparseCSR) -> tuple[SparseCSR, np.ndarray]:
    """Sparsity pattern of ``[[R_U, R], [R^T, R_I]]`` plus, for each stored
    entry, its position in ``concat(ru.vals, r.vals, r.vals, ri.vals)``."""
    _check_blocks(r, ru, ri)
    nu, ni = r.shape
    rt_order = np.lexsort((r.row_ids(), r.col_idx))  # R^T entries in (item, user) order
    rows = np.concatenate([ru.row_ids(), r.row_ids(), r.col_idx[rt_order] + nu, ri.row_ids() + nu])
    cols = np.concatenate([ru.col_idx, r.col_idx + nu, r.row_ids()[rt_order], ri.col_idx + nu])
    offs = np.cumsum([0, ru.nnz, r.nnz, r.nnz])
    src = np.concatenate([offs[0] + np.arange(ru.nnz), offs[1] + np.arange(r.nnz),
                          offs[2] + rt_order, offs[3] + np.arange(ri.nnz)])
    order = np.lexsort((cols, rows))
    rows, cols, src = rows[order], cols[order], src[order]
    n = nu + ni
    counts = np.bincount(rows, minlength=n)
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    pattern = SparseCSR(n, n, row_ptr, cols, np.ones(len(cols)))
    return pattern, src


def assemble_augmented(r: SparseCSR, ru: SparseCSR, ri: SparseCSR) -> AugmentedGraph:
    pattern, src = block_layout(r, ru, ri)
    vals = np.concatenate([ru.vals, r.vals, r.vals, ri.vals])[src]
    return AugmentedGraph(r.n_rows, r.n_cols, pattern.with_values(vals))


def assemble_traced(r: SparseCSR, ru, ri) -> TracedCSR:
    """Differentiable assembly: ``ru``/``ri`` may be :class:`TracedCSR`."""
    ru_p = ru.pattern if isinstance(ru, TracedCSR) else ru
    ri_p = ri.pattern if isinstance(ri, TracedCSR) else ri
    pattern, src = block_layout(r, ru_p, ri_p)

    def vals(m):
        return m.vals if isinstance(m, TracedCSR) else ad.constant(m.vals)

    rv = ad.constant(r.vals)
    allv = ad.concat_rows([vals(ru), rv, rv, vals(ri)])
    return TracedCSR(pattern, ad.row_gather(allv, src))


def laplacian_normalize(a):
    """``D^-1/2 A D^-1/2`` with ``D`` the row sums; zero-degree rows stay zero.

    Accepts a :class:`SparseCSR` (returns one) or a :class:`TracedCSR`
    (returns one, differentiable through the degrees).
    """
    if isinstance(a, TracedCSR):
        p = a.pattern
        rows = p.row_ids()
        deg = ad.segment_sum(a.vals, rows, p.n_rows)
        dinv = ad.inv_sqrt(deg)
        scale = ad.mul_elem(ad.row_gather(dinv, rows), ad.row_gather(dinv, p.col_idx))
        return TracedCSR(p, ad.mul_elem(a.vals, scale))
    if a.n_rows != a.n_cols:
        raise ValueError("adjacency must be square")
    if np.any(a.vals < 0):
        raise ValueError("laplacian_normalize requires a nonnegative adjacency")
    deg = a.row_sums()
    dinv = np.zeros_like(deg)
    pos = deg > 0
    dinv[pos] = deg[pos] ** -0.5
    rows = a.row_ids()
    return a.with_values(a.vals * dinv[rows] * dinv[a.col_idx])


def keep_count(nnz: int, rho: float) -> int:
    return min(nnz, math.ceil((1.0 - rho) * nnz - 1e-9))


def denoise_interactions(r: SparseCSR, rho: float, rng: np.random.Generator) -> SparseCSR:
    """Sample ``ceil((1-rho) * nnz)`` interaction edges without replacement,
    with probability proportional to ``1/sqrt(d_u * d_i)`` (degrees of ``r``)."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must be in [0, 1), got {rho}")
    if rho == 0.0 or r.nnz == 0:
        return r
    keep = keep_count(r.nnz, rho)
    du = r.row_nnz().astype(np.float64)
    di = r.col_counts().astype(np.float64)
    rows = r.row_ids()
    w = 1.0 / np.sqrt(du[rows] * di[r.col_idx])
    chosen = np.sort(rng.choice(r.nnz, size=keep, replace=False, p=w / w.sum()))
    return SparseCSR.from_coo(rows[chosen], r.col_idx[chosen], r.vals[chosen], r.shape)


def split_blocks(a: SparseCSR, n_users: int):
    """Inverse of :func:`assemble_augmented` (constant matrices)."""
    rows, cols, v = a.row_ids(), a.col_idx, a.vals
    n = a.n_rows
    ni = n - n_users

    def pick(rmask_lo, rmask_hi, cmask_lo, cmask_hi, shape, roff, coff):
        m = (rows >= rmask_lo) & (rows < rmask_hi) & (cols >= cmask_lo) & (cols < cmask_hi)
        return SparseCSR.from_coo(rows[m] - roff, cols[m] - coff, v[m], shape)

    ru = pick(0, n_users, 0, n_users, (n_users, n_users), 0, 0)
    r = pick(0, n_users, n_users, n, (n_users, ni), 0, n_users)
    rt = pick(n_users, n, 0, n_users, (ni, n_users), n_users, 0)
    ri = pick(n_users, n, n_users, n, (ni, ni), n_users, n_users)
    return ru, r, rt, ri


def denoise(graph: AugmentedGraph, rho: float, rng: np.random.Generator) -> AugmentedGraph:
    """Drop interaction edges of an augmented graph; similarity blocks are kept."""
    ru, r, _, ri = split_blocks(graph.A, graph.n_users)
    return assemble_augmented(denoise_interactions(r, rho, rng), ru, ri)


def inference_graphs(fused_users, fused_items, k: int,
                     block_size: int = DEFAULT_BLOCK) -> tuple[SparseCSR, SparseCSR]:
    fu = getattr(fused_users, "value", fused_users)
    fi = getattr(fused_items, "value", fused_items)
    return cosine_topk(fu, k, block_size).csr, cosine_topk(fi, k, block_size).csr
