"""CTC loss on random logits, then greedy and prefix beam decoding of the same frames."""

import torch

from uktr.ctc import ctc_beam_decode, ctc_greedy_decode, ctc_loss

torch.manual_seed(0)
T, c = 12, 9
logits = torch.randn(T, c, dtype=torch.float64, requires_grad=True)
target = [6, 7, 7, 8]

loss = ctc_loss(logits, target)
loss.backward()
print(f"-log p(target | x) = {loss.item():.4f}, grad norm {logits.grad.norm():.4f}")

with torch.no_grad():
    g = ctc_greedy_decode(logits)
    b = ctc_beam_decode(logits, beam_width=8)
print("greedy", g.ids, f"{g.score:.4f}")
print("beam  ", b.ids, f"{b.score:.4f}")
