"""Tour of the tensor library: tape recording, backward, and a finite-
difference spot check of a small attention-style computation."""

import numpy as np

from mmtprobe import autodiff as ad
from mmtprobe.autodiff import Tape, Tensor

print("== forward computation ==")
rng = np.random.default_rng(0)
q = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
k = Tensor(rng.standard_normal((5, 4)), requires_grad=True, dtype=np.float64)
v = Tensor(rng.standard_normal((5, 4)), requires_grad=True, dtype=np.float64)

with Tape() as tape:
    scores = ad.scale(ad.matmul(q, ad.permute(k, (1, 0))), 1 / np.sqrt(4))
    weights = ad.softmax_rows(scores)
    out = ad.matmul(weights, v)
    loss = ad.sum_all(ad.mul(out, out))

print("attention weights row sums:", weights.data.sum(axis=1))
print("loss:", float(loss.data))

print("\n== backward ==")
tape.backward(loss)
print("dq norm:", np.linalg.norm(q.grad))
print("dk norm:", np.linalg.norm(k.grad))

print("\n== central-difference spot check on q[0,0] ==")
h = 1e-5


def loss_at(q0):
    qq = q.data.copy()
    qq[0, 0] = q0
    s = (qq @ k.data.T) / np.sqrt(4)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    w = e / e.sum(axis=1, keepdims=True)
    o = w @ v.data
    return float((o * o).sum())


fd = (loss_at(q.data[0, 0] + h) - loss_at(q.data[0, 0] - h)) / (2 * h)
print(f"tape gradient {q.grad[0, 0]:+.8f}")
print(f"finite diff   {fd:+.8f}")
print(f"relative error {abs(q.grad[0, 0] - fd) / abs(fd):.2e}")

print("\n== the full suite (one seed, spot-checked) ==")
from mmtprobe.gradcheck import run_suite

for result in run_suite(op_seeds=range(1), model_seeds=range(1), coords_per_tensor=2):
    print(f"  {'ok' if result.passed else 'FAIL':4s} {result.name:40s} "
          f"max rel err {result.max_rel_error:.2e}")
