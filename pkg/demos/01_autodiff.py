"""Reverse-mode differentiation on a tape, checked against finite differences.

Run:  python demos/01_autodiff.py
"""
import numpy as np

from idfree import autodiff as ad
from idfree import gradcheck

rng = np.random.default_rng(0)

# A tape records every op applied to its parameters.  Values are 32-bit
# unless a precision scope says otherwise.
tape = ad.Tape()
x = tape.param(rng.standard_normal((3, 4)), "x")
w = tape.param(rng.standard_normal((4, 2)), "w")
loss = ad.sum(ad.tanh(ad.matmul(x, w)))
print("loss:", float(loss.value), "dtype:", loss.value.dtype)

# One backward sweep fills a gradient for every leaf, shaped like the leaf.
grads = ad.backward(tape, loss)
print("d loss / d w:\n", grads[w])

# The same function checked numerically in 64-bit.  The error is the largest
# absolute difference divided by the largest gradient magnitude.
res = gradcheck.check("sum_tanh_xw", lambda a, b: ad.sum(ad.tanh(ad.matmul(a, b))),
                      [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
print(f"{res.name}: relative error {res.rel_err:.1e} (bound {res.tol:.0e})")

# The full suite covers every registered op plus the whole training objective
# on a 4-user, 3-item problem.
for r in gradcheck.run_all(seed=0):
    print(f"  {'ok  ' if r.ok else 'FAIL'} {r.name:26s} {r.rel_err:.1e}")

# Debug mode turns silent NaN or inf values into errors that name the op.
with ad.debug_mode():
    try:
        ad.log(np.array([0.0]))
    except FloatingPointError as err:
        print("debug mode caught:", err)
