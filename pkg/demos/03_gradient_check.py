"""
Checking backprop against finite differences
============================================
"""

import numpy as np

from attnxfer import netcore
from attnxfer import energynet as en
from attnxfer.netcore import Conv2D, Dense, GlobalAvgPool, MaxPool, NetworkSpec, ReLU


def central_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


spec = NetworkSpec((1, 8, 8), (Conv2D(3, 3), ReLU(), MaxPool(2, 1), Conv2D(2, 2, stride=2), ReLU(),
                               GlobalAvgPool(), Dense(3)), last_conv=4)
params = netcore.init_params(spec, seed=1)
x = np.random.default_rng(1).normal(size=spec.input_shape)

loss = lambda: netcore.softmax_cross_entropy(netcore.forward(spec, params, x).logits, 2)[0]
trace = netcore.forward(spec, params, x)
_, g = netcore.softmax_cross_entropy(trace.logits, 2)
grads = netcore.backward(spec, params, trace, g)
for i, w in enumerate(params.weights):
    if w is not None:
        num = central_diff(loss, w)
        print(f"layer {i} ({spec.layers[i].kind}): max rel err",
              np.max(np.abs(grads.weights[i] - num) / np.maximum(1e-8, np.abs(num))))

# the same check for the EnergyNet joint loss, all four branches together
p = en.init_energynet(9, 2, hidden=6, d=4, seed=0)
rng = np.random.default_rng(0)
batch = en.SiameseBatch(*(rng.random((4, 11)) for _ in range(4)))
_, jg, _ = en.joint_loss_batch(batch, p)
for name in ("w1", "w2", "wf"):
    num = central_diff(lambda: en.joint_loss_batch(batch, p)[0], getattr(p, name))
    print(f"EnergyNet {name}: max abs err {np.max(np.abs(getattr(jg, name) - num)):.2e}")
