"""EHH network and ANOVA importance on a function with known structure.

The target depends strongly on x0, weakly on x1, jointly on (x0, x2) through
a min-term, and not at all on x3. After training, the ANOVA table should
rank the inputs accordingly and give x3 (almost) nothing.

    python3 demos/02_ehh_anova.py
"""

import numpy as np

from pwltsc.ehh import anova_decompose, ehh_generate, ehh_train
from pwltsc.pwlnet import brelu_bias_grid

rng = np.random.default_rng(0)
X = rng.normal(size=(2000, 4))
y = 3.0 * np.maximum(0, X[:, 0]) + 0.5 * X[:, 1] + 2.0 * np.minimum(np.maximum(0, X[:, 0] + 0.2), np.maximum(0, X[:, 2]))
y = y[:, None]

# BReLU grid per input from its mean and standard deviation
grid = brelu_bias_grid(X.std(axis=0), X.mean(axis=0))
net = ehh_generate(4, grid, P=2, cap=None, rng=rng)
ehh_train(net, X, y, lam=1e-3)

pred = net.forward(X)
r2 = 1 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)
print(f"{net.n_nodes} nodes ({net.n_sources} hinges), {net.nonzero_weights()} nonzero weights, train R2 {r2:.4f}")

rep = anova_decompose(net, X)
print("\ncomponent      sigma")
for name, s in sorted(rep.rows(), key=lambda r: -r[1])[:8]:
    print(f"{name:<12} {s:8.4f}")
print("\nper-input importance (pairs split evenly):", np.round(rep.per_component, 3))
