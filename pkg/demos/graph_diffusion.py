"""
Region graphs and diffusion
===========================

Build a thresholded Gaussian-kernel graph over random centroids, then look
at the random-walk operators, the truncated stationary distribution and the
Chebyshev terms the spatial branch consumes.
"""

import numpy as np

from uqstp import dataset, graph

centroids = dataset.random_centroids(8, seed=2, extent=6.0)
g = graph.build_adjacency(graph.pairwise_distances(centroids), sigma2=4.0, r=0.1)
print(f"{g.n_regions} regions, {g.edge_count} edges, density {g.density:.2f}")

ops = graph.diffusion_operators(g)
# rows of the transition matrix sum to one
print(ops.forward.sum(axis=1))

###############################################################################
# The truncated series alpha * sum_k (1 - alpha)^k W^k loses mass
# (1 - alpha)^(K+1); watch it approach one.
for K in (0, 1, 2, 4, 8, 16):
    P, mass = graph.stationary_distribution(ops, alpha=0.2, K=K)
    print(K, round(mass, 4))

###############################################################################
# Chebyshev terms follow T_k = 2 W T_{k-1} - T_{k-2}.
basis = graph.chebyshev_basis(ops, 3)
for k, T in enumerate(basis.matrices):
    print(k, np.round(np.abs(T).max(), 3))
