"""
Sliding-window energy
=====================

The energy of a map is the largest sum of any s x s window. The fast
version uses a summed-area table and re-sums the few windows close to the
maximum, so it agrees with the double loop to the last bit.
"""

import time

import numpy as np

from attnxfer import energy

print(energy.window_energy(np.ones((7, 7))))  # every window sums to 9
print(energy.window_energy(np.eye(4)))  # best windows hold 3 diagonal ones

rng = np.random.default_rng(0)
maps = [rng.random((16, 16)) for _ in range(2000)]

t = time.perf_counter()
slow = [energy.window_energy(m) for m in maps]
t_slow = time.perf_counter() - t
t = time.perf_counter()
fast = [energy.window_energy_fast(m) for m in maps]
t_fast = time.perf_counter() - t
print(f"identical: {slow == fast}  naive {t_slow:.2f}s  fast {t_fast:.2f}s")

# classify one video: a blob in concept 2's maps makes it the winner
stacks = 0.05 * rng.random((6, 4, 5, 5))
stacks[:, 2, 1:4, 0:3] += 1.0
winner, table = energy.classify_unatt(stacks)
print("winner:", winner, " scores:", np.round(table.scores, 3))
