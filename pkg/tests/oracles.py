"""Reference implementations used only by the tests.

Each one avoids the code path it checks: dense linear algebra instead of
closed forms, sequential scans instead of asynchronous workers.
"""

import numpy as np
from scipy import linalg


def exp_corr(n, scale):
    i = np.arange(n)
    return np.exp(-scale * np.abs(i[:, None] - i[None, :]))


def dense_gp_gibbs(y, phi, rho, priors, n_iter, seed, burn_in=0, init=(10.0, 10.0, 10.0)):
    """Sequential Gibbs over (theta, mu, sigma2, tau2) with theta drawn as one block.

    Uses the eigendecomposition of the dense correlation matrix, so every
    conditional is exact.  Returns a dict of post-burn-in draws.
    """
    rng = np.random.default_rng(seed)
    n = y.size
    a_mu, b_mu, a_s, b_s, a_t, b_t = priors
    lam, q = linalg.eigh(exp_corr(n, phi * rho))
    hinv = (q / lam) @ q.T
    hinv1 = hinv.sum(axis=1)
    one_h_one = hinv1.sum()
    qty = q.T @ y
    qthinv1 = q.T @ hinv1
    mu, s2, t2 = init
    theta = np.zeros(n)
    out = {"theta": [], "mu": [], "sigma2": [], "tau2": [], "theta_mean": []}
    for it in range(n_iter):
        d = 1.0 / (t2 * lam) + 1.0 / s2
        rq = mu * qthinv1 / t2 + qty / s2
        cond_mean = q @ (rq / d)
        theta = cond_mean + q @ (rng.standard_normal(n) / np.sqrt(d))
        prec = one_h_one / t2 + 1.0 / b_mu
        mu = rng.normal((hinv1 @ theta / t2 + a_mu / b_mu) / prec, np.sqrt(1.0 / prec))
        r = y - theta
        s2 = (b_s + 0.5 * r @ r) / rng.gamma(a_s + 0.5 * n)
        z = theta - mu
        t2 = (b_t + 0.5 * z @ hinv @ z) / rng.gamma(a_t + 0.5 * n)
        if it >= burn_in:
            out["theta"].append(theta)
            out["theta_mean"].append(cond_mean)
            out["mu"].append(mu)
            out["sigma2"].append(s2)
            out["tau2"].append(t2)
    return {k: np.asarray(v) for k, v in out.items()}


def mixed_sequential_gibbs(y, F, W, kappa_mu, kappa_gamma, eps, n_iter, seed, init=None):
    """Sequential-scan Gibbs for the hierarchical mixed-effects model, recomputing every statistic from scratch.

    Given the top level the ``beta_i`` are conditionally independent, so one
    sweep over them is drawn as a single batched step.  Returns the per-sweep
    draws of ``mu``, ``gamma``, ``nu`` and ``Sigma``.
    """
    from scipy import stats

    rng = np.random.default_rng(seed)
    n, k, d = F.shape
    mu, sigma, gamma, nu = (np.zeros(d), np.eye(d), np.zeros(k), 1.0) if init is None else init
    FtF = np.einsum("nkd,nke->nde", F, F)
    WtW = np.einsum("nkj,nkl->jl", W, W)
    out = {"mu": [], "gamma": [], "nu": [], "Sigma": []}
    for _ in range(n_iter):
        sinv = np.linalg.inv(sigma)
        prec = FtF / nu + sinv
        rhs = np.einsum("nkd,nk->nd", F, y - W @ gamma) / nu + sinv @ mu
        cov = np.linalg.inv(prec)
        mean = np.einsum("nde,ne->nd", cov, rhs)
        beta = mean + np.einsum("nde,ne->nd", np.linalg.cholesky(cov), rng.standard_normal((n, d)))
        pm = n * sinv + np.eye(d) / kappa_mu
        cm = np.linalg.inv(pm)
        mu = rng.multivariate_normal(cm @ sinv @ beta.sum(0), cm)
        z = beta - mu
        sigma = stats.invwishart.rvs(df=d + 1 + n, scale=np.eye(d) + z.T @ z, random_state=rng)
        pg = WtW / nu + np.eye(k) / kappa_gamma
        cg = np.linalg.inv(pg)
        resid_f = y - np.einsum("nkd,nd->nk", F, beta)
        gamma = rng.multivariate_normal(cg @ np.einsum("nkj,nk->j", W, resid_f) / nu, cg)
        r = resid_f - W @ gamma
        nu = stats.invgamma.rvs(0.5 * (eps + n * k), scale=0.5 * (eps + float(np.sum(r * r))), random_state=rng)
        out["mu"].append(mu)
        out["gamma"].append(gamma)
        out["nu"].append(nu)
        out["Sigma"].append(sigma)
    return {key: np.array(v) for key, v in out.items()}
