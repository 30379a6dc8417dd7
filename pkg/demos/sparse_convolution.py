"""
Sparsity-invariant convolution
==============================

A normalised convolution only looks at valid pixels, so whatever sits under the
mask's holes never leaks into the output.
"""
import torch

from cafnet.ops import sparse_conv

torch.manual_seed(0)
x = torch.randn(1, 1, 8, 8, dtype=torch.float64)
mask = (torch.rand(1, 1, 8, 8) < 0.25).double()
kernel = torch.ones(1, 1, 3, 3, dtype=torch.float64)

y, mask_out = sparse_conv(x, mask, kernel)
print("valid in:", int(mask.sum()), "valid out:", int(mask_out.sum()))

# Fill the holes with garbage: the output does not move.
y2, _ = sparse_conv(x + 1e6 * (1 - mask), mask, kernel)
print("max change:", (y - y2).abs().max().item())

# With every pixel valid and a ones kernel, this is a local mean.
full, _ = sparse_conv(x, torch.ones_like(mask), kernel, eps=1e-12)
print("centre pixel vs 3x3 mean:", full[0, 0, 4, 4].item(), x[0, 0, 3:6, 3:6].mean().item())
