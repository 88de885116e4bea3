"""Reverse-mode autodiff on numpy arrays, checked against finite differences."""
# %%
import numpy as np

from retrieval_lab import diffcore as dc

rng = np.random.default_rng(0)
a = dc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = dc.Tensor(rng.normal(size=(4, 2)))

# a tiny graph: softmax of a product, squared and summed
loss = dc.sum(dc.square(dc.softmax_rows(dc.matmul(a, b), temperature=2.0)))
loss.backward()
print("loss", loss.item())
print("analytic grad\n", a.grad)

# %% central differences on the same function
def f(x):
    return dc.sum(dc.square(dc.softmax_rows(dc.matmul(dc.Tensor(x), b), 2.0))).item()

num = np.zeros_like(a.data)
h = 1e-6
for i in np.ndindex(a.shape):
    x = a.data.copy()
    x[i] += h
    up = f(x)
    x[i] -= 2 * h
    num[i] = (up - f(x)) / (2 * h)
print("max abs difference", np.abs(num - a.grad).max())

# %% domain errors name the offending element
try:
    dc.log(dc.Tensor(np.array([1.0, 0.0, 3.0])))
except dc.DomainError as exc:
    print("DomainError:", exc)
