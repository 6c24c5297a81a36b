"""Central finite-difference checks for every differentiable op and for the
end-to-end objective, run in 64-bit."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses, simgraph
from .model import AblationFlags, ModelConfig, ModelInputs, forward, init_params, project
from .sparse import SparseCSR

OP_TOL = 1e-4
E2E_TOL = 1e-3
STEP = 1e-4
# small enough that a step rarely straddles a ReLU kink in the gate
E2E_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.rel_err < self.tol)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max|a - b| scaled by the larger of the two max magnitudes."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[list], float], arrays: list, h: float = STEP) -> list:
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f(arrays)
            a[i] = old - h
            dn = f(arrays)
            a[i] = old
            g[i] = (up - dn) / (2 * h)
        grads.append(g)
    return grads


def check(name: str, fn: Callable, arrays: list, tol: float = OP_TOL,
          h: float = STEP) -> CheckResult:
    """Compare tape gradients of scalar ``fn(*tensors)`` with finite differences."""
    with ad.precision(64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        tape = ad.Tape()
        leaves = [tape.param(a) for a in arrays]
        grads = ad.backward(tape, fn(*leaves))
        analytic = [grads[t] for t in leaves]
        numeric = numeric_grad(lambda arrs: float(fn(*[ad.constant(x) for x in arrs]).value),
                               arrays, h)
    # one norm over all inputs: a parameter with a near-zero gradient would
    # otherwise turn finite-difference roundoff into a large relative error
    err = relative_error(np.concatenate([a.ravel() for a in analytic]),
                         np.concatenate([n.ravel() for n in numeric]))
    return CheckResult(name, err, tol)


def _project_out(rng, shape):
    w = rng.standard_normal(shape)
    return lambda t: ad.sum(ad.mul_elem(t, ad.constant(w)))


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    out = []

    def add_check(name, fn, arrays):
        out.append(check(name, fn, arrays))

    p34, p32, p3, p6 = (_project_out(rng, s) for s in [(3, 4), (3, 2), (3,), (6,)])
    add_check("matmul", lambda a, b: p32(ad.matmul(a, b)), [r((3, 4)), r((4, 2))])
    add_check("add", lambda a, b: p34(ad.add(a, b)), [r((3, 4)), r(4)])
    add_check("sub", lambda a, b: p34(ad.sub(a, b)), [r((3, 4)), r((3, 4))])
    add_check("mul_elem", lambda a, b: p34(ad.mul_elem(a, b)), [r((3, 4)), r((3, 4))])
    add_check("scale", lambda a: p34(ad.scale(a, -1.7)), [r((3, 4))])
    add_check("tanh", lambda a: p34(ad.tanh(a)), [r((3, 4))])
    x = r((3, 4))
    x[np.abs(x) < 0.05] += 0.2           # keep clear of the kink
    add_check("relu", lambda a: p34(ad.relu(a)), [x])
    add_check("sigmoid", lambda a: p34(ad.sigmoid(a)), [3 * r((3, 4))])
    add_check("exp", lambda a: p34(ad.exp(a)), [r((3, 4))])
    add_check("log", lambda a: p34(ad.log(a)), [rng.uniform(0.5, 2.0, (3, 4))])
    add_check("inv_sqrt", lambda a: p3(ad.inv_sqrt(a)), [rng.uniform(0.5, 2.0, 3)])
    p24 = _project_out(rng, (2, 4))
    add_check("layernorm", lambda a, g, b: p24(ad.layernorm(a, g, b)), [r((2, 4)), r(4), r(4)])
    add_check("row_gather", lambda a: p34(ad.row_gather(a, [2, 0, 2])), [r((3, 4))])
    add_check("segment_sum", lambda a: p3(ad.segment_sum(a, [0, 2, 2, 1, 0, 2], 3)), [r(6)])
    add_check("sum", lambda a: p3(ad.sum(a, axis=1)), [r((3, 4))])
    add_check("concat_rows", lambda a, b: p34(ad.concat_rows([a, b])), [r((1, 4)), r((2, 4))])
    add_check("slice_rows", lambda a: p32(ad.slice_rows(a, 1, 4)), [r((5, 2))])
    add_check("transpose", lambda a: p34(ad.transpose(a)), [r((4, 3))])
    add_check("reshape", lambda a: p6(ad.reshape(a, (6,))), [r((2, 3))])
    add_check("normalize_rows", lambda a: p34(ad.normalize_rows(a)), [r((3, 4))])
    add_check("logsumexp", lambda a: p3(ad.logsumexp(a)), [r((3, 4))])

    dense = rng.random((5, 5)) * (rng.random((5, 5)) < 0.5)
    A = SparseCSR.from_dense(dense)
    p52 = _project_out(rng, (5, 2))
    add_check("spmm", lambda b: p52(ad.spmm(A, b)), [r((5, 2))])
    add_check("spmm_values",
              lambda v, b: p52(ad.spmm(ad.TracedCSR(A, v), b)), [A.vals.copy(), r((5, 2))])
    pv = _project_out(rng, (A.nnz,))
    add_check("laplacian_normalize",
              lambda v: pv(simgraph.laplacian_normalize(ad.TracedCSR(A, v)).vals),
              [rng.uniform(0.2, 1.0, A.nnz)])

    def asg(ht, hv, w0, w1, b0, b1):
        g = simgraph.adaptive_weights(A, ht, hv, {"W0": w0, "W1": w1, "b0": b0, "b1": b1})
        return pv(g.vals)
    add_check("adaptive_weights", asg,
              [r((5, 3)), r((5, 3)), r((3, 3)), r((3, 3)), r(3), r(3)])
    pp = _project_out(rng, (3, 4))
    add_check("project", lambda x, w, b, g, s: pp(project(x, w, b, g, s)),
              [r((3, 5)), r((5, 4)), r(4), r(4), r(4)])
    add_check("infonce_align", lambda a, b: losses.infonce_align(a, b, 0.2), [r((3, 4)), r((3, 4))])
    add_check("softmax_rec_loss",
              lambda u, p, n: losses.softmax_rec_loss(u, p, n, 0.2), [r((3, 4)), r((3, 4)), r((3, 4))])
    add_check("softmax_rec_loss_literal",
              lambda u, p, n: losses.softmax_rec_loss(u, p, n, 0.2, "literal"),
              [r((3, 4)), r((3, 4)), r((3, 4))])
    return out


def tiny_instance(seed: int = 0, n_users: int = 4, n_items: int = 3, d_t: int = 5, d_v: int = 6):
    """A fully specified 4-user/3-item problem with every module active."""
    rng = np.random.default_rng(seed)
    r_dense = np.zeros((n_users, n_items))
    for u in range(n_users):
        r_dense[u, rng.choice(n_items, size=1 + u % 2, replace=False)] = 1.0
    r = SparseCSR.from_dense(r_dense)
    item_t = rng.standard_normal((n_items, d_t))
    item_v = rng.standard_normal((n_items, d_v))
    user_t = (r_dense @ item_t) / r_dense.sum(1, keepdims=True)
    user_v = (r_dense @ item_v) / r_dense.sum(1, keepdims=True)
    ru = simgraph.fuse_modal_graphs(simgraph.cosine_topk(user_t, 2), simgraph.cosine_topk(user_v, 2))
    ri = simgraph.fuse_modal_graphs(simgraph.cosine_topk(item_t, 1), simgraph.cosine_topk(item_v, 1))
    inputs = ModelInputs(n_users, n_items, np.vstack([user_t, item_t]), np.vstack([user_v, item_v]),
                         r, ru, ri, np.zeros(n_users, dtype=bool))
    return inputs, rng


def end_to_end_check(seed: int = 0, d: int = 4, tol: float = E2E_TOL) -> CheckResult:
    """Total loss gradient w.r.t. every parameter on a 4-user/3-item problem."""
    inputs, rng = tiny_instance(seed)
    cfg = ModelConfig(d=d, k=2, layers=2, flags=AblationFlags())
    params = {k: v.astype(np.float64) * 2.0 for k, v in init_params(*inputs.dims, d, rng).items()}
    for k in params:
        if k.endswith(("_b0", "_b1", "b_t", "b_v", "_shift")):
            params[k] = 0.3 * rng.standard_normal(params[k].shape)
    batch = losses.TripletBatch(np.array([0, 1, 2, 3]), np.array([0, 1, 2, 0]), np.array([1, 2, 0, 2]))
    names = list(params)

    def loss(*tensors):
        bundle = forward(dict(zip(names, tensors)), inputs, cfg, "train", inputs.r_train)
        total, _ = losses.compute_losses(bundle, batch, 0.3)
        return total

    return check("end_to_end", loss, [params[k] for k in names], tol, E2E_STEP)


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + [end_to_end_check(seed)]
