"""Reverse-mode autodiff, gradient reversal and the Adam + Noam optimizer."""

import numpy as np

from madi import autodiff as ad
from madi.autodiff import OptimizerState, Tensor, adam_step, noam_lr

# d(x*x)/dx at x=3
x = Tensor(3.0, requires_grad=True)
ad.backward(x * x)
print("d(x^2)/dx at 3:", x.grad)

# a tensor used twice collects both branch gradients
x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
ad.backward((x * x).sum() + (3.0 * x).sum())
print("2x + 3:", x.grad)

# finite differences agree with the tape
rng = np.random.default_rng(0)
w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
f = lambda: ad.logsumexp(ad.tanh(w) @ np.ones(3), axis=0)
print("max rel. error vs finite differences:", ad.gradient_check(f, [w]))

# gradient reversal: identity forward, -strength * grad backward
x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
y = ad.grad_reverse(x, 0.5)
ad.backward(y.sum())
print("forward", y.data, "backward", x.grad)

# the schedule peaks at the warmup step
print("noam lr at 25/100/400 (warmup 100):", [round(noam_lr(s, 1.0, 100), 4) for s in (25, 100, 400)])

# minimize (p - 4)^2
p = {"p": Tensor(np.array(0.0), requires_grad=True)}
state = OptimizerState(base_lr=5.0, warmup_steps=20)
for _ in range(300):
    p["p"].grad = None
    ad.backward((p["p"] - 4.0) ** 2)
    adam_step(p, {"p": p["p"].grad}, state)
print("argmin found:", float(p["p"].data))
