"""Gradients of gradients with the numpy autodiff engine."""
import numpy as np

from fgsmlab import autodiff as ad

x = ad.Tensor(np.array([3.0]), requires_grad=True)
y = ad.sum(x * x * x)

(g,) = ad.grad(y, [x], create_graph=True)  # 3x^2, still differentiable
(h,) = ad.grad(ad.sum(g), [x])              # 6x
print("f'(3) =", g.item(), " f''(3) =", h.item())

# the same trick on a tiny softplus net: d/dw of ||d loss / d input||
rng = np.random.default_rng(0)
w = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
inp = ad.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
loss = ad.cross_entropy(ad.softplus_param(ad.linear(inp, w), 2.0), np.array([0, 2]))
gx = ad.grad(loss, inp, create_graph=True)
penalty = ad.l2_norm(gx)
gw = ad.grad(penalty, w)
print("input-gradient norm:", penalty.item())
print("its gradient wrt w:\n", np.round(gw.data, 4))

with ad.op_counter() as count:
    ad.grad(ad.sum(ad.softplus_param(inp, 2.0)), inp, create_graph=True)
print("ops recorded while building the backward graph:", count.recorded_in_backward)
