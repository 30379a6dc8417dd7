"""
Finite-difference gradient checks
=================================

``grad_check`` compares autograd against central differences one coordinate at a
time and returns the worst relative error.
"""
import torch

from cafnet.model import cagf_fuse
from cafnet.ops import grad_check

torch.manual_seed(0)
f_r = torch.randn(1, 6, 4, 8, dtype=torch.float64)
f_c = torch.randn(1, 5, 4, 8, dtype=torch.float64)
conf = torch.rand(1, 1, 16, 32, dtype=torch.float64)
params = {"p": torch.randn(6, dtype=torch.float64), "q": torch.randn(6, 5, dtype=torch.float64)}


def loss(q):
    return cagf_fuse(f_r, f_c, conf, 2, q["p"], q["q"]).square().sum()


print("fusion block:", grad_check(loss, params, eps=1e-6))
print("quadratic:   ", grad_check(lambda q: (q["t"] ** 2).sum(), {"t": torch.randn(10, dtype=torch.float64)}))
