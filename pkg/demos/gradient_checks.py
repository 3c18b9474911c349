"""Gradients of gradients: the penalty term checked against finite differences.

The critic's gradient penalty differentiates the critic's input gradient, so
training it needs second-order derivatives.  This script prints the analytic
and numeric derivatives of the penalty with respect to a few critic weights.
"""

import numpy as np

from advasr.autodiff import gradient
from advasr.clm import ClmConfig, Critic, gradient_penalty

rng = np.random.default_rng(0)
critic = Critic(ClmConfig(vocab_size=5, embed_dim=4, batchnorm=False), rng)
real = np.eye(5)[rng.integers(3, 5, size=(3, 6))]
fake = rng.dirichlet(np.ones(5), size=(3, 6))
lens, eps = np.full(3, 6), rng.uniform(size=3)

w = critic.proj.weight
analytic = gradient(gradient_penalty(critic, real, fake, lens, eps), [w])[0].data
step = 1e-5
print("coordinate      analytic          numeric")
for idx in [(0, 0), (1, 2), (3, 4)]:
    base = w.data.copy()
    vals = []
    for sgn in (1, -1):
        w.data = base.copy()
        w.data[idx] += sgn * step
        vals.append(gradient_penalty(critic, real, fake, lens, eps).item())
    w.data = base
    print(f"{str(idx):12s} {analytic[idx]: .10f}  {(vals[0] - vals[1]) / (2 * step): .10f}")
