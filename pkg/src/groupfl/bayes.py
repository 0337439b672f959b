"""Posterior of one client's parameter in a three-level Gaussian hierarchy.

The hierarchy is::

    theta_0             ~ flat
    theta_m | theta_0   ~ N(theta_0, sigma0_sq)          m = 1..M
    x_mn    | theta_m   ~ N(theta_m, sigma_mn_sq)        n = 1..N_m

with every client of group ``m`` sharing the group parameter. The target is
the first client of the first group; use :func:`with_target` to move any
other client into that slot.

Three knowledge-sharing regimes are supported: the client's own data only,
its group's data, and all groups' data. Each has a closed form and
:func:`mc_posterior_oracle` checks them by self-normalised importance
sampling over the full joint density.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ContractError, VerificationError

__all__ = [
    "BayesHierarchy",
    "Posterior",
    "MCEstimate",
    "posterior_no_sharing",
    "posterior_group_sharing",
    "posterior_global_sharing",
    "posterior_global_sharing_exact",
    "variance_ratio_group",
    "variance_ratio_global",
    "mc_posterior_oracle",
    "random_hierarchy",
    "with_target",
]

REGIMES = ("none", "group", "global")


@dataclass(frozen=True)
class BayesHierarchy:
    """Observed data and fixed variances; ``x[m][n]`` is client ``n`` of group ``m``.

    ``sigma_m_sq`` holds the client-around-group variances. Only the
    degenerate case where clients equal their group parameter is supported,
    so it must be ``None`` or all zeros when a posterior is requested.
    """

    x: tuple[np.ndarray, ...]
    sigma_mn_sq: tuple[np.ndarray, ...]
    sigma0_sq: float
    sigma_m_sq: np.ndarray | None = None

    @classmethod
    def build(cls, x: Sequence[Sequence[float]], sigma_mn_sq: Sequence[Sequence[float]],
              sigma0_sq: float, sigma_m_sq=None) -> "BayesHierarchy":
        xs = tuple(np.asarray(g, dtype=np.float64).reshape(-1) for g in x)
        vs = tuple(np.asarray(g, dtype=np.float64).reshape(-1) for g in sigma_mn_sq)
        sm = None if sigma_m_sq is None else np.asarray(sigma_m_sq, dtype=np.float64)
        return cls(xs, vs, float(sigma0_sq), sm)

    @property
    def M(self) -> int:
        return len(self.x)

    @property
    def N(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.x)

    def check(self) -> "BayesHierarchy":
        if self.M < 1 or any(n < 1 for n in self.N):
            raise ContractError("every group needs at least one client")
        if tuple(len(v) for v in self.sigma_mn_sq) != self.N:
            raise ContractError("sigma_mn_sq does not match the shape of x")
        if not (np.isfinite(self.sigma0_sq) and self.sigma0_sq > 0):
            raise ContractError("sigma0_sq must be positive and finite")
        for xg, vg in zip(self.x, self.sigma_mn_sq):
            if not np.all(np.isfinite(xg)):
                raise ContractError("observations must be finite")
            if not np.all((vg > 0) & np.isfinite(vg)):
                raise ContractError("observation variances must be positive and finite")
        if self.sigma_m_sq is not None and np.any(np.asarray(self.sigma_m_sq) != 0):
            raise NotImplementedError(
                "posteriors are only available when clients share their group parameter "
                "(sigma_m_sq = 0)")
        return self


@dataclass(frozen=True)
class Posterior:
    mean: float
    variance: float


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    variance: float
    stderr: float
    ess: float


def with_target(h: BayesHierarchy, group: int, client: int) -> BayesHierarchy:
    """Reorder groups and clients so that ``(group, client)`` becomes the target slot."""
    order = [group] + [m for m in range(h.M) if m != group]
    xs = [h.x[m] for m in order]
    vs = [h.sigma_mn_sq[m] for m in order]
    perm = [client] + [n for n in range(len(xs[0])) if n != client]
    xs[0], vs[0] = xs[0][perm], vs[0][perm]
    sm = None if h.sigma_m_sq is None else np.asarray(h.sigma_m_sq)[order]
    return BayesHierarchy(tuple(xs), tuple(vs), h.sigma0_sq, sm)


def posterior_no_sharing(h: BayesHierarchy) -> Posterior:
    h.check()
    return Posterior(float(h.x[0][0]), float(h.sigma_mn_sq[0][0]))


def _group_precision(h: BayesHierarchy, m: int) -> tuple[float, float]:
    """Total precision of group ``m`` and its precision-weighted data sum."""
    prec = 1.0 / h.sigma_mn_sq[m]
    return float(prec.sum()), float((prec * h.x[m]).sum())


def posterior_group_sharing(h: BayesHierarchy) -> Posterior:
    h.check()
    prec, weighted = _group_precision(h, 0)
    return Posterior(weighted / prec, 1.0 / prec)


def _other_groups_clientwise(h: BayesHierarchy) -> tuple[float, float]:
    # every other-group client is weighted by 1 / (sigma0^2 + sigma_mn^2)
    w = np.concatenate([1.0 / (h.sigma0_sq + v) for v in h.sigma_mn_sq[1:]])
    xo = np.concatenate(h.x[1:])
    return float((w * xo).sum() / w.sum()), float(1.0 / w.sum())


def _combine(h: BayesHierarchy, mu_rest: float, var_rest: float) -> Posterior:
    prec, weighted = _group_precision(h, 0)
    a = 1.0 / (h.sigma0_sq + var_rest)
    return Posterior((weighted + a * mu_rest) / (prec + a), 1.0 / (prec + a))


def posterior_global_sharing(h: BayesHierarchy) -> Posterior:
    """Combine group-1 evidence with a client-wise pooled estimate from the other groups.

    Other-group observations enter as independent draws with variance
    ``sigma0_sq + sigma_mn_sq``. This is the exact posterior when each other
    group has a single client. With several clients per group it ignores
    the parameter they share; :func:`posterior_global_sharing_exact`
    handles that case.
    """
    h.check()
    if h.M < 2:
        raise ContractError("global sharing needs at least two groups; use posterior_group_sharing")
    return _combine(h, *_other_groups_clientwise(h))


def posterior_global_sharing_exact(h: BayesHierarchy) -> Posterior:
    """Exact global-sharing posterior: each other group is first reduced to its
    precision-weighted mean, which then varies around ``theta_0`` with variance
    ``sigma0_sq + 1/sum(precision)``."""
    h.check()
    if h.M < 2:
        raise ContractError("global sharing needs at least two groups; use posterior_group_sharing")
    w, wx = [], []
    for m in range(1, h.M):
        prec, weighted = _group_precision(h, m)
        w.append(1.0 / (h.sigma0_sq + 1.0 / prec))
        wx.append(w[-1] * weighted / prec)
    return _combine(h, sum(wx) / sum(w), 1.0 / sum(w))


def variance_ratio_group(h: BayesHierarchy) -> float:
    """Group-sharing over no-sharing posterior variance; 1.0 for a single-client group."""
    h.check()
    v = h.sigma_mn_sq[0]
    return float(1.0 / (1.0 + np.sum(v[0] / v[1:])))


def variance_ratio_global(h: BayesHierarchy) -> float:
    h.check()
    if h.M < 2:
        raise ContractError("global sharing needs at least two groups")
    prec, _ = _group_precision(h, 0)
    _, var_rest = _other_groups_clientwise(h)
    return float(1.0 / (1.0 + (1.0 / (h.sigma0_sq + var_rest)) / prec))


# -- Monte-Carlo oracle -------------------------------------------------------

def _gauss_quad(h: BayesHierarchy, m: int) -> tuple[float, float, float]:
    """Coefficients of sum_n log N(x_mn; t, v_mn) = -(A t^2 - 2 B t + C)/2 + const."""
    p = 1.0 / h.sigma_mn_sq[m]
    return float(p.sum()), float((p * h.x[m]).sum()), float((p * h.x[m] ** 2).sum())


def _log_target(h: BayesHierarchy, regime: str, z: np.ndarray) -> np.ndarray:
    """Unnormalised log joint density of the latent block ``z`` (one row per sample)."""
    if regime == "none":
        t = z[:, 0]
        return -0.5 * (t - h.x[0][0]) ** 2 / h.sigma_mn_sq[0][0]
    if regime == "group":
        A, B, C = _gauss_quad(h, 0)
        t = z[:, 0]
        return -0.5 * (A * t * t - 2 * B * t + C)
    # global: columns are (theta_1, ..., theta_M, theta_0)
    theta0 = z[:, -1]
    out = np.zeros(z.shape[0])
    for m in range(h.M):
        t = z[:, m]
        A, B, C = _gauss_quad(h, m)
        out += -0.5 * (A * t * t - 2 * B * t + C)
        out += -0.5 * (t - theta0) ** 2 / h.sigma0_sq
    return out


def _initial_proposal(h: BayesHierarchy, regime: str) -> tuple[np.ndarray, np.ndarray]:
    if regime == "none":
        return np.array([h.x[0][0]]), np.array([[4.0 * h.sigma_mn_sq[0][0]]])
    # each group's own maximum-likelihood estimate and its sampling variance
    centers, spreads = [], []
    for m in range(h.M if regime == "global" else 1):
        prec, weighted = _group_precision(h, m)
        centers.append(weighted / prec)
        spreads.append(1.0 / prec)
    if regime == "global":
        spreads = [s + h.sigma0_sq for s in spreads]
        centers.append(float(np.mean(centers)))
        spreads.append(h.sigma0_sq + max(spreads) + float(np.var(centers)))
    return np.array(centers), np.diag(4.0 * np.array(spreads))


def _importance_pass(h, regime, mean, cov, n, rng):
    chol = np.linalg.cholesky(cov)
    eps = rng.standard_normal((n, mean.size))
    z = mean + eps @ chol.T
    log_q = -0.5 * np.sum(eps * eps, axis=1)  # up to a constant shared by all samples
    log_w = _log_target(h, regime, z) - log_q
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    return z, w


def mc_posterior_oracle(h: BayesHierarchy, regime: str, n_samples: int,
                        rng: np.random.Generator, adapt_rounds: int = 4,
                        adapt_samples: int = 50_000, chunk: int = 250_000) -> MCEstimate:
    """Brute-force posterior mean and variance of the target parameter.

    Self-normalised importance sampling of the full joint density of every
    latent parameter the regime conditions on: the target group's parameter
    alone for ``"none"``/``"group"``, and all group parameters plus the global
    one for ``"global"``. A Gaussian proposal starts wide around the data
    averages and is refitted to the weighted samples for a few pilot rounds.
    """
    if regime not in REGIMES:
        raise ContractError(f"unknown regime {regime!r}")
    if n_samples < 10_000:
        raise ContractError("n_samples must be at least 1e4")
    h.check()
    mean, cov = _initial_proposal(h, regime)
    for _ in range(adapt_rounds):
        z, w = _importance_pass(h, regime, mean, cov, adapt_samples, rng)
        mean = w @ z
        centred = z - mean
        fitted = (centred * w[:, None]).T @ centred
        cov = 1.5**2 * fitted + 1e-12 * np.eye(mean.size) * np.trace(fitted)

    # weights from separate chunks share the same proposal, so pool log-weights
    zs, log_ws = [], []
    chol = np.linalg.cholesky(cov)
    remaining = n_samples
    while remaining:
        k = min(chunk, remaining)
        eps = rng.standard_normal((k, mean.size))
        z = mean + eps @ chol.T
        log_ws.append(_log_target(h, regime, z) + 0.5 * np.sum(eps * eps, axis=1))
        zs.append(z[:, 0])
        remaining -= k
    t = np.concatenate(zs)
    log_w = np.concatenate(log_ws)
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    ess = 1.0 / float(np.sum(w * w))
    if ess < 100:
        raise VerificationError(f"effective sample size {ess:.1f} < 100; widen the proposal")
    est_mean = float(w @ t)
    est_var = float(w @ (t - est_mean) ** 2)
    return MCEstimate(est_mean, est_var, float(np.sqrt(est_var / ess)), ess)


def random_hierarchy(rng: np.random.Generator, M: tuple[int, int] = (2, 5),
                     N: tuple[int, int] = (1, 8), variance: tuple[float, float] = (0.1, 10.0),
                     theta0: float = 0.0) -> BayesHierarchy:
    """Draw sizes and variances uniformly from the given inclusive ranges, then data
    from the hierarchy itself."""
    n_groups = int(rng.integers(M[0], M[1] + 1))
    sigma0_sq = float(rng.uniform(*variance))
    xs, vs = [], []
    for _ in range(n_groups):
        theta_m = rng.normal(theta0, np.sqrt(sigma0_sq))
        n = int(rng.integers(N[0], N[1] + 1))
        v = rng.uniform(*variance, size=n)
        xs.append(rng.normal(theta_m, np.sqrt(v)))
        vs.append(v)
    return BayesHierarchy(tuple(xs), tuple(vs), sigma0_sq)
