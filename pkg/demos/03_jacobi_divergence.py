# %% [markdown]
# # Jacobi sampling
#
# Updating every coordinate at once from the previous sweep is Jacobi
# sampling. Its mean follows the Jacobi iteration for the precision matrix,
# so it diverges whenever that iteration's spectral radius exceeds one.

# %%
import numpy as np

from asyncgibbs import build_exponential_target, build_jacobi_target, run_jacobi
from asyncgibbs.gaussian import diagonally_dominant, jacobi_iteration_matrix, spectral_radius

for name, t in (("jacobi", build_jacobi_target(8)), ("exponential", build_exponential_target(8, 0.5))):
    rho = spectral_radius(jacobi_iteration_matrix(t.precision))
    trace, flag = run_jacobi(t, np.zeros(8), 10_000, np.random.default_rng(0), bound=1e6)
    print(f"{name:12s} spectral radius {rho:.3f}  diagonally dominant {diagonally_dominant(t.precision)}  "
          f"divergence flagged at step {flag}")
