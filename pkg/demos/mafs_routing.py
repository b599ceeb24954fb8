"""Route a batch through MAFS and show the routing vector and the feature mix it produces."""

import torch

from uktr.mafs import MAFS, MafsConfig

torch.manual_seed(0)
d, n = 32, 3
block = MAFS(MafsConfig(n=n, p=8, d=d))
g = torch.randn(4, d, 2, 10)
g1d = g.mean(dim=2)

u, u1d, r = block(g, g1d)
print("routing vectors (rows sum to 1):")
for row in r:
    print("  ", [round(v, 3) for v in row.tolist()])
print("U", tuple(u.shape), "U_1d", tuple(u1d.shape))

# the output is the r-weighted sum of the individual adapter outputs
h = torch.stack([a(g) for a in block.adapters], dim=1)
mix = (r[:, :, None, None, None] * h).sum(1)
print("max |U - sum_i r_i H_i| =", (u - mix).abs().max().item())
