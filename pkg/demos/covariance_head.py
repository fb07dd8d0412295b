"""
Turning an unconstrained vector into a covariance
=================================================

The probabilistic head emits M(M+1)/2 free numbers per region and step.
Here we follow one such vector through the symmetric fill and the
eigenvalue floor.
"""

import numpy as np

from uqstp import mpp

# Three phenomena need six numbers: the upper triangle, row by row.
z = np.array([0.8, 0.9, -0.2, 0.3, 0.1, -0.4])
W = mpp.half_vector_to_symmetric(z).data
print("symmetric fill\n", W)

# W is symmetric but not positive definite.
print("eigenvalues before", np.linalg.eigvalsh(W))

# Raise every eigenvalue below the floor to the floor and rebuild.
S = mpp.clamp_to_pd(W, v_min=1e-4).data
print("eigenvalues after ", np.linalg.eigvalsh(S))

# Clamping twice changes nothing
print("idempotent:", np.allclose(mpp.clamp_to_pd(S).data, S, atol=1e-9))

###############################################################################
# The loss on an observation uses a Cholesky factor of the clamped matrix.
x = np.array([0.5, 0.2, -0.1])
mu = np.zeros(3)
print("gaussian nll", float(mpp.gaussian_nll(x, mu, S).data))
print("laplace  nll", float(mpp.laplace_nll(x, mu, S).data))

# With a diagonal covariance the joint loss is just a sum of 1-d losses.
var = np.array([0.3, 1.2, 0.7])
print(float(mpp.gaussian_nll(x, mu, np.diag(var)).data), mpp.univariate_gaussian_nll(x, mu, var))
