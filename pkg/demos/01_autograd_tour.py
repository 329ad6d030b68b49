# %% [markdown]
# # A tour of the autograd engine
#
# Every network in this package runs on a small reverse-mode engine built on
# numpy arrays. This script builds a few graphs by hand, compares the
# gradients against central finite differences, and then shows what the
# checker reports when a backward rule is broken on purpose.

# %%
import numpy as np

from roilab import tensor as T
from roilab.gradcheck import fault_injection, grad_check, run_suite
from roilab.tensor import Tensor

# %% [markdown]
# ## Gradients by hand
#
# `sum(p**2)` at p = [1, 2] has gradient [2, 4]. A tensor that feeds two
# consumers gets both contributions summed.

# %%
p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
T.backward(T.tensor_sum(T.square(p)))
print("d sum(p^2) / dp =", p.grad)

q = Tensor(np.array([3.0]), requires_grad=True)
T.backward(T.tensor_sum(T.elementwise_merge(q, q, "mul")))  # q*q uses q twice
print("d (q*q) / dq at 3 =", q.grad)

# %% [markdown]
# ## A convolution checked against finite differences
#
# `grad_check` re-runs the function in float64 with eps = 1e-3 and reports
# the worst relative error over sampled coordinates.

# %%
rng = np.random.default_rng(0)
x = rng.standard_normal((2, 3, 5, 5))
w = rng.standard_normal((4, 3, 3, 3))
b = rng.standard_normal(4)
err = grad_check(lambda x, w, b: T.tensor_sum(T.conv2d(x, w, b, stride=1, padding=1)), [x, w, b])
print(f"conv2d max relative error: {err:.2e}")

# %% [markdown]
# ## The full suite, then a negative control
#
# With a healthy build every primitive sits far below 1e-4. Scaling the ReLU
# backward by 1.5 makes the checker fail loudly, which is the point of
# having it.

# %%
for r in run_suite(seeds=(0, 1), include_model=False):
    print(f"  {r.name:<24} {r.max_rel_error:.1e}")

with fault_injection("relu"):
    broken = [r for r in run_suite(seeds=(0,), include_model=False) if r.name == "relu"][0]
print(f"relu with a corrupted backward: {broken.max_rel_error:.2f}")
