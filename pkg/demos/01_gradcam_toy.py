"""
Grad-CAM on a network small enough to check by hand
===================================================

The class score is 0.5 times the sum of one 2x2 feature map, so every
channel weight is 0.5 and the map is ReLU(0.5 * A).
"""

import numpy as np

from attnxfer import gradcam, netcore
from attnxfer.netcore import Conv2D, Dense, GlobalAvgPool, NetworkParams, NetworkSpec

A = np.array([[1.0, -2.0], [3.0, 0.0]])

# identity 1x1 conv exposes A as the last-conv output; GAP then a weight of 2
# gives score = 2 * mean(A) = 0.5 * sum(A)
spec = NetworkSpec((1, 2, 2), (Conv2D(1, 1), GlobalAvgPool(), Dense(1)), last_conv=0)
params = NetworkParams([np.ones((1, 1, 1, 1)), None, np.array([[2.0]])], [np.zeros(1), None, np.zeros(1)])

print("attention map:\n", gradcam.attention_map(spec, params, A[None], 0))

# a bias on the class score changes nothing
params.biases[-1][:] = 10.0
print("with +10 bias:\n", gradcam.attention_map(spec, params, A[None], 0))

# the default network: 24x24 frames give 5x5 maps, one per concept
spec = netcore.default_spec(4)
params = netcore.init_params(spec, seed=0)
frame = np.random.default_rng(0).random(spec.input_shape)
stack = gradcam.attention_stack(spec, params, frame)
print("stack shape:", stack.shape, " min value:", stack.min())
