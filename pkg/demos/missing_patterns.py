"""
Missing patterns at a glance
============================

Draws every scenario on a small 4 x 200 grid, prints it as text, and shows
how the block-shape distribution recovered from a mask is what training
later imitates.
"""

import numpy as np

from deepmvi.scenarios import MissScenario, block_shapes, generate, make_rng, sample_shape

N, T = 4, 200


def show(name, M):
    print(f"\n{name}  ({int(M.sum())} hidden cells)")
    for row in M:
        print("  " + "".join("#" if v else "." for v in row))


# MCAR: the first ceil(x% of N) series get T/100 blocks of length 10
show("mcar x=50", generate((N, T), MissScenario("mcar", x_percent=50, seed=1)))

# each series loses its own slice of time, no two overlap
show("missdisj", generate((N, T), MissScenario("missdisj")))

# like missdisj, but every block is twice as long and overlaps the next one
show("missover", generate((N, T), MissScenario("missover")))

# all series go dark at once, starting at 5% of the horizon
show("blackout s=10", generate((N, T), MissScenario("blackout", block_size=10)))

# scattered short runs hiding 10% of every series
show("point b=2", generate((N, T), MissScenario("point", block_size=2, seed=4)))

# block_shapes turns a mask back into the multiset of (series, length) shapes
M = generate((N, T), MissScenario("missover"))
dist = block_shapes(M)
print("\nshapes found in missover:", dist.counts())

# training draws synthetic blocks uniformly from that multiset
rng = make_rng(0)
draws = [sample_shape(dist, rng) for _ in range(1000)]
share = np.mean([d == (1, 2 * T // N) for d in draws])
print(f"share of long blocks among 1000 draws: {share:.3f}")
