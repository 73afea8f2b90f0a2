# %% [markdown]
# # Streaming diagnostics
#
# Long runs keep summaries rather than full histories: an online mean and
# covariance, a reservoir sample of acceptance probabilities, and ACFs of
# thinned traces.

# %%
import numpy as np

from asyncgibbs.diagnostics import OnlineMoments, Reservoir, acf, batch_means_se

rng = np.random.default_rng(0)
phi = 0.8
x = np.zeros(50_000)
for t in range(1, x.size):
    x[t] = phi * x[t - 1] + rng.standard_normal()
print("ACF lags 0..4:", acf(x, 4).round(3), " theory:", (phi ** np.arange(5)).round(3))
print("batch-means SE:", batch_means_se(x[:, None]).round(4))

# %%
a, b = OnlineMoments(2), OnlineMoments(2)
for row in rng.normal(size=(1000, 2)):
    a.add(row)
for row in rng.normal(loc=1.0, size=(3000, 2)):
    b.add(row)
print("merged mean:", a.merge(b).mean.round(3))

# %%
r1, r2 = Reservoir(100, rng), Reservoir(100, rng)
for _ in range(900):
    r1.add(0.0)
for _ in range(100):
    r2.add(1.0)
print("share from the smaller stream after merging:", r1.merge(r2).array().mean())
