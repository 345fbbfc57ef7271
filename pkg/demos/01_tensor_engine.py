"""Tour of the tensor engine: ops, the tape, and gradient verification.

Run:  python3 demos/01_tensor_engine.py
"""

import numpy as np

from boundaryseg import autodiff as ad
from boundaryseg.autodiff import Tensor

# ---------------------------------------------------------------- forward ops
# Tensors wrap numpy buffers; ops record themselves on a tape.
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((1, 1, 6, 6, 6)).astype(np.float32), requires_grad=True)
w = Tensor((rng.standard_normal((2, 1, 3, 3, 3)) * 0.4).astype(np.float32),
           requires_grad=True)

feat = ad.relu(ad.conv3d(x, w, padding=1))
print("conv3d + relu:", x.shape, "->", feat.shape)

up = ad.trilinear_upsample(feat)
print("trilinear upsample x2:", feat.shape, "->", up.shape)

probs = ad.sigmoid(up)
print("sigmoid range: (%.4f, %.4f)" % (probs.data.min(), probs.data.max()))

# ------------------------------------------------------------------ backward
# A scalar loss back-propagates through the tape; leaves get .grad.
loss = ad.reduce_sum(ad.mul(probs, probs))
ad.backward(loss)
print("loss = %.4f; grad shapes: x %s, w %s" % (loss.item(), x.grad.shape, w.grad.shape))

# Calling backward twice on one tape, or backward with stale grads, is an
# error by contract: silent gradient accumulation is a classic training bug.
try:
    ad.backward(loss)
except Exception as exc:
    print("double backward rejected:", type(exc).__name__)
x.grad = None
w.grad = None

# ------------------------------------------------------- gradient validation
# The same harness the test suite and `boundaryseg gradcheck` use: central
# finite differences at 64-bit against the tape gradients.
x64 = Tensor(rng.standard_normal((1, 1, 4, 4, 4)), requires_grad=True, dtype=np.float64)
w64 = Tensor(rng.standard_normal((2, 1, 3, 3, 3)) * 0.4, requires_grad=True,
             dtype=np.float64)


def graph():
    return ad.reduce_sum(ad.sigmoid(ad.conv3d(x64, w64, padding=1)))


err = ad.finite_diff_check(graph, [x64, w64])
print(f"finite-difference check, conv3d+sigmoid graph: max rel err = {err:.2e}")
assert err < 1e-4
print("engine demo done.")
