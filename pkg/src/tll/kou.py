"""Double-exponential (Kou) pure-jump model.

Levy density, the compound-Poisson tail probability Psi, and the
closed-form European call pricer under zero rates and no diffusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc, gammaincc, gammaln, logsumexp
from scipy.stats import poisson

_TRUNC_TOL = 1e-12


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class KouParams:
    """Parameters of the double-exponential jump density.

    lam: jump intensity per year, lam > 0.
    lam1: decay rate of positive jumps, lam1 > 1 (finite exp moment).
    lam2: decay rate of negative jumps, lam2 > 0.
    p: probability of an upward jump, p in (0, 1).
    """

    lam: float
    lam1: float
    lam2: float
    p: float

    def __post_init__(self) -> None:
        if not self.lam > 0.0:
            raise InvalidParameterError(f"lam must be > 0, got {self.lam}")
        if not self.lam1 > 1.0:
            raise InvalidParameterError(f"lam1 must be > 1, got {self.lam1}")
        if not self.lam2 > 0.0:
            raise InvalidParameterError(f"lam2 must be > 0, got {self.lam2}")
        if not 0.0 < self.p < 1.0:
            raise InvalidParameterError(f"p must be in (0,1), got {self.p}")

    @property
    def q(self) -> float:
        return 1.0 - self.p

    @property
    def zeta(self) -> float:
        """E[e^J] - 1 for one jump J; finite because lam1 > 1."""
        return (
            self.p * self.lam1 / (self.lam1 - 1.0)
            + self.q * self.lam2 / (self.lam2 + 1.0)
            - 1.0
        )

    def star(self) -> "StarParams":
        z = self.zeta
        lam_star = self.lam * (z + 1.0)
        p_star = self.p / (1.0 + z) * self.lam1 / (self.lam1 - 1.0)
        return StarParams(
            lam_star=lam_star,
            p_star=p_star,
            lam1_star=self.lam1 - 1.0,
            lam2_star=self.lam2 + 1.0,
            zeta=z,
        )


@dataclass(frozen=True)
class StarParams:
    """Share-measure counterparts used by the call pricer."""

    lam_star: float
    p_star: float
    lam1_star: float
    lam2_star: float
    zeta: float


def levy_density(params: KouParams, x) -> np.ndarray:
    """Jump intensity density eta(x); integrates to lam."""
    x = np.asarray(x, dtype=float)
    up = params.p * params.lam1 * np.exp(-params.lam1 * np.maximum(x, 0.0))
    dn = params.q * params.lam2 * np.exp(params.lam2 * np.minimum(x, 0.0))
    return params.lam * np.where(x >= 0.0, up, dn)


def _pq_tables(n_star: int, p: float, q: float, lam1: float, lam2: float):
    """Log-space tables of the jump-count mixing coefficients.

    Returns (logP, logQ), each (n_star+1, n_star+1), where logP[n, k] is
    log of the coefficient multiplying the k-term gamma tail when n jumps
    occur.  Entries outside 1 <= k <= n are -inf.
    """
    neg_inf = -np.inf
    logP = np.full((n_star + 1, n_star + 1), neg_inf)
    logQ = np.full((n_star + 1, n_star + 1), neg_inf)
    if n_star == 0:
        return logP, logQ

    log_p, log_q = np.log(p), np.log(q)
    log_r1 = np.log(lam1) - np.log(lam1 + lam2)
    log_r2 = np.log(lam2) - np.log(lam1 + lam2)
    lg = gammaln(np.arange(2 * n_star + 2) + 1.0)

    idx = np.arange(1, n_star + 1)
    logP[idx, idx] = idx * log_p
    logQ[idx, idx] = idx * log_q
    if n_star == 1:
        return logP, logQ

    # all terms at once over (n, k, i) with k <= i <= n-1, 1 <= k <= n-1
    n = idx[:, None, None]
    k = idx[None, :, None]
    i = idx[None, None, :]
    valid = (i >= k) & (i <= n - 1) & (k <= n - 1)
    ik = np.where(valid, i - k, 0)
    # log binom(n-k-1, i-k) + log binom(n, i)
    base = (
        lg[np.where(valid, n - k - 1, 0)] - lg[ik]
        - lg[np.where(valid, n - 1 - i, 0)]
        + lg[n] - lg[i] - lg[np.where(valid, n - i, 0)]
    )
    tP = np.where(valid, base + ik * log_r1 + (n - i) * log_r2
                  + i * log_p + (n - i) * log_q, neg_inf)
    tQ = np.where(valid, base + ik * log_r2 + (n - i) * log_r1
                  + i * log_q + (n - i) * log_p, neg_inf)

    def lse(t):
        m = t.max(axis=2)
        finite = m > neg_inf
        safe_m = np.where(finite, m, 0.0)
        s = np.exp(t - safe_m[:, :, None]).sum(axis=2)
        return np.where(finite, safe_m + np.log(s), neg_inf)

    with np.errstate(divide="ignore", invalid="ignore"):
        sP = lse(tP)
        sQ = lse(tQ)
    off = idx[:, None] > idx[None, :]  # k < n entries
    logP[1:, 1:][off] = sP[off]
    logQ[1:, 1:][off] = sQ[off]
    return logP, logQ


def psi(mu: float, lam: float, p: float, lam1: float, lam2: float, a, T: float):
    """P{Z(T) >= a} for Z = mu*t + compound Poisson with double-exp jumps.

    Vectorized over a.  The jump-count series is truncated at the
    smallest n* whose omitted Poisson mass is below 1e-12.
    """
    a = np.asarray(a, dtype=float)
    scalar = a.ndim == 0
    a = np.atleast_1d(a)
    y = a - mu * T

    lamT = lam * T
    if lamT <= 0.0:
        out = (y <= 0.0).astype(float)
        return float(out[0]) if scalar else out

    n_star = int(poisson.isf(_TRUNC_TOL, lamT)) + 1
    n = np.arange(n_star + 1)
    log_pi = -lamT + n * np.log(lamT) - gammaln(n + 1.0)

    logP, logQ = _pq_tables(n_star, p, 1.0 - p, lam1, lam2)
    # collapse over n: weights per gamma-tail order k
    sp = np.exp(logsumexp(log_pi[:, None] + logP, axis=0))  # (n_star+1,)
    sq = np.exp(logsumexp(log_pi[:, None] + logQ, axis=0))

    k = np.arange(1, n_star + 1)
    out = np.empty_like(y)
    pos = y >= 0.0
    if np.any(pos):
        yp = y[pos]
        # sum_k sp[k] * Q(k, lam1*y) where Q is the regularized upper gamma
        tails = gammaincc(k[None, :], lam1 * yp[:, None])
        # the zero-jump atom sits exactly at y = 0 and belongs to the tail
        out[pos] = tails @ sp[1:] + np.exp(-lamT) * (yp == 0.0)
    if np.any(~pos):
        yn = y[~pos]
        tails_p = np.ones((yn.size, n_star))  # upper tail at negative arg is 1
        tails_q = gammainc(k[None, :], -lam2 * yn[:, None])
        out[~pos] = np.exp(-lamT) + tails_p @ sp[1:] + tails_q @ sq[1:]
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def psi_params(mu: float, params: KouParams, a, T: float):
    return psi(mu, params.lam, params.p, params.lam1, params.lam2, a, T)


def call_price(params: KouParams, spot: float, strike, T: float):
    """European call under the pure-jump model with zero rates.

    C = S Psi(-lam zeta; star params) - K Psi(-lam zeta; params), both
    tails evaluated at a = log(K/S).  Vectorized over strike.
    """
    strike = np.asarray(strike, dtype=float)
    scalar = strike.ndim == 0
    strike = np.atleast_1d(strike)
    if spot <= 0.0 or np.any(strike <= 0.0):
        raise InvalidParameterError("spot and strike must be positive")
    if T <= 0.0:
        out = np.maximum(spot - strike, 0.0)
        return float(out[0]) if scalar else out

    a = np.log(strike / spot)
    s = params.star()
    mu = -params.lam * params.zeta
    t1 = psi(mu, s.lam_star, s.p_star, s.lam1_star, s.lam2_star, a, T)
    t2 = psi(mu, params.lam, params.p, params.lam1, params.lam2, a, T)
    c = spot * t1 - strike * t2
    c = np.clip(c, np.maximum(spot - strike, 0.0), spot)
    return float(c[0]) if scalar else c


def sample_jumps(params: KouParams, size, rng: np.random.Generator) -> np.ndarray:
    """Draw double-exponential jump sizes (used by Monte Carlo oracles)."""
    u = rng.random(size)
    up = rng.standard_exponential(size) / params.lam1
    dn = -rng.standard_exponential(size) / params.lam2
    return np.where(u < params.p, up, dn)
